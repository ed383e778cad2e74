"""Command-line entry point: ``chrnn {train,evaluate,gradcheck,audit,degencheck}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
abort, 5 failed self-check. ``HRNN_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checks, data, hrnn, kernels
from . import config as cfg
from . import model as M
from . import train as T
from .convnet import ConvLayerSpec
from .tensor import NumericalError

log = logging.getLogger("chrnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5

REFERENCE_HIDDEN = 256
REFERENCE_SCALES = ((1, 1), (2, 2), (3, 3), (6, 6))
GRADCHECK_MAX_GRID = 4
GRADCHECK_MAX_HIDDEN = 8


class UsageError(cfg.ConfigError):
    pass


# ----------------------------------------------------------------- config


def _flag_overrides(args) -> list[str]:
    out = []
    if getattr(args, "cell", None):
        out.append(f"model.cell={args.cell}")
    if getattr(args, "scales", None):
        out.append(f"model.scales={args.scales}")
    if getattr(args, "task", None):
        out.append(f"data.task={args.task}")
    if getattr(args, "seed", None) is not None:
        out.append(f"train.seed={args.seed}")
    if getattr(args, "threads", None) is not None:
        out.append(f"train.threads={args.threads}")
    for name in ("train_images", "train_labels", "val_images", "val_labels"):
        v = getattr(args, name, None)
        if v:
            out.append(f"data.{name}={v}")
    return out


def effective_config(args) -> cfg.RunConfig:
    """Config file, then ``--set`` overrides, then dedicated flags."""
    text = ""
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.is_file():
            raise cfg.ConfigError(f"config file not found: {p}")
        text = p.read_text()
    try:
        return cfg.loads(text, list(getattr(args, "set", None) or []) + _flag_overrides(args))
    except ValueError as e:
        if isinstance(e, cfg.ConfigError):
            raise
        raise cfg.ConfigError(str(e)) from None


def echo(run: cfg.RunConfig, out=None) -> None:
    out = out or sys.stdout
    out.write(f"# seed = {run.train.seed}\n# kernel = {kernels.name_of(kernels.default)}\n")
    out.write(cfg.dump(run))
    out.flush()


# ------------------------------------------------------------------- data


def load_datasets(run: cfg.RunConfig, mean=None) -> tuple[data.Dataset, data.Dataset]:
    d, m = run.data, run.model
    if d.task == "synthetic":
        if m.n_classes != 2 or m.in_channels != 1 or m.image_size != data.LAYOUT * data.CELL:
            raise cfg.ConfigError(f"synthetic task needs model.n_classes=2, in_channels=1, "
                                  f"image_size={data.LAYOUT * data.CELL}")
        if run.train.flip_augment:
            raise cfg.ConfigError("train.flip_augment must be off for the synthetic task: mirroring flips its label")
        return (data.gen_context_task(d.n_train, d.data_seed, "train"),
                data.gen_context_task(d.n_val, d.data_seed + 1, "val"))
    for key in ("train_images", "train_labels", "val_images", "val_labels"):
        if not getattr(d, key):
            raise data.DataError(f"data.{key} is required for the idx task (--{key.replace('_', '-')})")
    tr = data.load_idx(d.train_images, d.train_labels, mean, "train", m.n_classes)
    va = data.load_idx(d.val_images, d.val_labels, tr.mean, "val", m.n_classes)
    if tr.images.shape[1:] != (m.in_channels, m.image_size, m.image_size):
        raise data.DataError(f"images are {tr.images.shape[2]}x{tr.images.shape[3]} but "
                             f"model.image_size={m.image_size}")
    return tr, va


# --------------------------------------------------------------- commands


def cmd_train(args) -> int:
    run = effective_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo(run)
    state_ck = data.load_checkpoint(args.resume) if args.resume else None
    tr, va = load_datasets(run, state_ck.mean if state_ck is not None else None)
    if state_ck is not None:
        if cfg.dump(state_ck.run) != cfg.dump(run):
            log.warning("resuming with a config that differs from the checkpoint's")
        state = T.TrainState.from_checkpoint(state_ck)
    else:
        state = T.init_state(M.init_params(run.model, run.train.seed), run.train)
    (out / "config.ini").write_text(cfg.dump(run))
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "a" if state_ck is not None else "w") as sink:
        T.emit({"event": "start", "seed": run.train.seed, "kernel": kernels.name_of(kernels.default),
                "n_train": len(tr), "n_val": len(va), "step": state.step}, [sink])
        sinks = [sink] + ([sys.stdout] if args.verbose else [])
        try:
            with threadpool_limits(limits=run.train.threads):
                T.train_loop(run.model, run.train, tr, va, state, sinks, max_steps=args.max_steps)
        finally:
            data.save_checkpoint(out / "checkpoint.ckpt", T.make_checkpoint(run, state, tr.mean))
    final = next((r for r in reversed(state.history) if r.get("split") == "val"), None)
    if final is not None:
        print(json.dumps(final))
    print(f"checkpoint: {out / 'checkpoint.ckpt'}\nmetrics: {metrics_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ck = data.load_checkpoint(args.checkpoint)
    run = ck.run
    over = _flag_overrides(args)
    if over:
        run = cfg.build(cfg.apply_overrides(cfg.parse_text(cfg.dump(run)), over))
    echo(run)
    _, va = load_datasets(run, ck.mean)
    print(json.dumps(T.evaluate(run.model, ck.params, va)))
    return EXIT_OK


def gradcheck_config(cell: str, grid: int, hidden: int, n_classes: int, scales=None) -> M.ModelConfig:
    scales = tuple(scales) if scales else ((1, 1), (grid, grid))
    big = max(max(s) for s in scales)
    if big > GRADCHECK_MAX_GRID:
        raise UsageError(f"gradcheck grids are limited to {GRADCHECK_MAX_GRID}x{GRADCHECK_MAX_GRID}, got {big}")
    if not 1 <= hidden <= GRADCHECK_MAX_HIDDEN:
        raise UsageError(f"gradcheck hidden size must be in [1, {GRADCHECK_MAX_HIDDEN}], got {hidden}")
    try:
        return M.ModelConfig(in_channels=1, image_size=2 * big,
                             conv=(ConvLayerSpec(hidden, 3, 1, 1, True, (2, 2)),), scales=scales,
                             cell=cell, fc=(8, 8), n_classes=n_classes, dropout=0.5).validate()
    except ValueError as e:
        raise UsageError(str(e)) from None


def _corrupt(grads: dict) -> None:
    # test hook: a wrong recurrent gradient must be caught
    k = next(k for k in sorted(grads) if k.endswith("W_row"))
    grads[k].reshape(-1)[0] += 0.05


def cmd_gradcheck(args) -> int:
    scales = cfg.parse_scales(args.scales) if args.scales else None
    config = gradcheck_config(args.cell or hrnn.SRN, args.grid, args.hidden, args.classes, scales)
    print(f"# seed = {args.seed}\n# cell = {config.cell} scales = {cfg.format_scales(config.scales)} "
          f"hidden = {config.hidden} classes = {config.n_classes}")
    report = checks.model_gradcheck(config, args.seed, fault=_corrupt if args.inject_fault else None)
    print(report)
    if not report.passed:
        for g in report.failures():
            print(f"gradcheck failed: {g.name} at {g.worst_index} "
                  f"(rel_err={g.worst_error:.3e} > {report.tolerance:g})", file=sys.stderr)
        return EXIT_CHECK
    print(f"worst relative error {report.worst.worst_error:.3e} <= {report.tolerance:g}")
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.paper:
        cell = args.cell or hrnn.SRN
        hidden = depth = REFERENCE_HIDDEN
        scales = REFERENCE_SCALES
    else:
        run = effective_config(args)
        cell, hidden, depth, scales = run.model.cell, run.model.hidden, run.model.depth, run.model.scales
    c = hrnn.count_parameters(hidden, depth, scales, cell)
    print(f"# cell = {cell} hidden = {hidden} depth = {depth} scales = {cfg.format_scales(scales)}")
    print(f"matrices={c.matrices} params={c.matrix_params}")
    print(f"biases={c.biases} scanned_scales={c.scanned_scales} cross_connections={c.cross_connections}")
    return EXIT_OK


def cmd_degencheck(args) -> int:
    scales = cfg.parse_scales(args.scales) if args.scales else REFERENCE_SCALES
    print(f"# seed = {args.seed}\n# trials = {args.trials} hidden = {args.hidden} "
          f"scales = {cfg.format_scales(scales)}")
    dev = checks.degeneracy_deviation(args.trials, args.seed, args.hidden, scales,
                                      perturb=args.perturb, zero_input=args.zero_input)
    print(f"max_abs_deviation={dev:.3e}")
    if dev > args.tol:
        print(f"degeneracy check failed: deviation {dev:.3e} > {args.tol:g}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser, seed_default=None) -> None:
    p.add_argument("--config", help="config file ([section] key = value)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default 1)")
    p.add_argument("--cell", choices=hrnn.CELLS)
    p.add_argument("--scales", help="e.g. 1x1,2x2,3x3,6x6")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=("idx", "synthetic"))
    for name in ("train-images", "train-labels", "val-images", "val-labels"):
        p.add_argument(f"--{name}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chrnn", description="Convolutional hierarchical RNN image classifier.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _data_flags(p)
    p.add_argument("--out", default="runs/run", help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many total steps")
    p.add_argument("-v", "--verbose", action="store_true", help="also print metrics records")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the validation split")
    p.add_argument("checkpoint")
    p.add_argument("--threads", type=int, default=None)
    _data_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    p.add_argument("--cell", choices=hrnn.CELLS, default=hrnn.SRN)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--scales", help="overrides --grid, e.g. 1x1,2x2,4x4")
    p.add_argument("--hidden", type=int, default=6)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("audit", help="count recurrent transformation matrices and parameters")
    _common(p)
    p.add_argument("--paper", action="store_true", help="reference size: H=D=256, scales 1x1,2x2,3x3,6x6")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("degencheck", help="verify the zero-recurrence reduction to pooled features")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--scales")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--perturb", action="store_true", help="negative control: one non-zero recurrent weight")
    p.add_argument("--zero-input", action="store_true", help="all-zero pyramids")
    p.set_defaults(func=cmd_degencheck)
    return ap


def _setup_logging() -> None:
    level = os.environ.get("HRNN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    log.debug("command %s, scan kernels %s", args.command, kernels.name_of(kernels.default))
    threads = args.threads if getattr(args, "threads", None) is not None else 1
    try:
        if threads < 1:
            raise cfg.ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=threads):
            return args.func(args)
    except cfg.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, data.CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
