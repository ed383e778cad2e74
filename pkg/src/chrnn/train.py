"""SGD with momentum, plateau learning-rate schedule, training and evaluation loops."""
from __future__ import annotations

import fnmatch
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, TextIO

import numpy as np

from . import model as M
from .config import TrainConfig
from .data import Checkpoint, Dataset
from .tensor import NumericalError

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainState", "sgd_step", "lr_schedule", "lr_multipliers", "train_loop",
           "evaluate", "init_state"]


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    lr: float
    momentum: float
    step: int = 0
    epoch: int = 0
    best_acc: float = -1.0
    stale: int = 0
    epoch_losses: list[float] = field(default_factory=list)  # losses so far in the running epoch
    history: list[dict] = field(default_factory=list)

    def meta(self) -> dict[str, str]:
        return {"lr": repr(self.lr), "momentum": repr(self.momentum), "step": str(self.step),
                "epoch": str(self.epoch), "best_acc": repr(self.best_acc), "stale": str(self.stale),
                "epoch_losses": ",".join(repr(v) for v in self.epoch_losses)}

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "TrainState":
        m = ck.meta
        vel = {k: ck.velocity.get(k, np.zeros_like(v)) for k, v in ck.params.items()}
        losses = [float(v) for v in m.get("epoch_losses", "").split(",") if v]
        return cls(dict(ck.params), vel, float(m["lr"]), float(m["momentum"]), int(m["step"]),
                   int(m["epoch"]), float(m["best_acc"]), int(m["stale"]), losses)


def init_state(params: dict[str, np.ndarray], tc: TrainConfig) -> TrainState:
    return TrainState(params, {k: np.zeros_like(v) for k, v in params.items()}, tc.lr, tc.momentum)


def lr_multipliers(names, tc: TrainConfig) -> dict[str, float]:
    """Per-parameter learning-rate multipliers: frozen globs get 0, hrnn.* gets ``hrnn_lr_mult``."""
    out = {}
    for n in names:
        m = tc.hrnn_lr_mult if n.startswith("hrnn.") else 1.0
        if any(fnmatch.fnmatchcase(n, g) for g in tc.freeze):
            m = 0.0
        out[n] = m
    return out


def sgd_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], velocity: dict[str, np.ndarray],
             lr: float, momentum: float, mults: Mapping[str, float] | None = None, weight_decay: float = 0.0) -> None:
    """In place: ``v <- momentum*v - lr*mult*(g + wd*theta)``; ``theta <- theta + v``."""
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {k}")
        m = 1.0 if mults is None else mults.get(k, 1.0)
        if m == 0.0:
            continue
        if weight_decay:
            g = g + weight_decay * theta
        v = velocity[k]
        v *= momentum
        v -= (lr * m) * g
        theta += v


def lr_schedule(state: TrainState, accuracy: float, patience: int) -> TrainState:
    """Divide the learning rate by 10 after ``patience`` evaluations without improvement."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {accuracy}")
    if accuracy > state.best_acc:
        state.best_acc = accuracy
        state.stale = 0
    else:
        state.stale += 1
        if state.stale >= patience:
            state.lr /= 10.0
            state.stale = 0
    return state


def topk_accuracy(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is among the k highest scores.

    Ties rank the lower class index first.
    """
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    # stable sort on -p keeps lower indices first among equal scores
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def evaluate(config: M.ModelConfig, params, ds: Dataset, batch_size: int = 256, backend=None) -> dict[str, float]:
    """Eval-mode Top-1 (and Top-5 when there are at least 5 classes) plus mean loss."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = M.predict(config, params, ds.images, batch_size, backend)
    picked = probs[np.arange(len(ds)), ds.labels]
    out = {"loss": float(np.mean(-np.log(np.maximum(picked, 1e-12)))),
           "top1": topk_accuracy(probs, ds.labels, 1)}
    if config.n_classes >= 5:
        out["top5"] = topk_accuracy(probs, ds.labels, 5)
    return out


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Dropout/augmentation randomness depends only on (seed, step), so resuming is exact."""
    return np.random.default_rng([seed, 1, step])


def emit(record: dict, sinks: list[TextIO]) -> None:
    line = json.dumps(record, sort_keys=False)
    for s in sinks:
        s.write(line + "\n")
        s.flush()


def train_loop(config: M.ModelConfig, tc: TrainConfig, train: Dataset, val: Dataset | None,
               state: TrainState, sinks: list[TextIO] = (), max_steps: int | None = None,
               on_step: Callable[[TrainState, float], None] | None = None, backend=None) -> TrainState:
    """Train from ``state`` until ``tc.epochs`` epochs or ``max_steps`` total steps.

    Batches come from a per-epoch permutation seeded by ``(seed, epoch)``; the
    final partial batch is kept. Each finished epoch logs train loss and
    (if ``val`` is given) validation metrics, then updates the schedule.
    Raises :class:`NumericalError` on a non-finite loss.
    """
    n = len(train)
    per_epoch = -(-n // tc.batch_size)
    mults = lr_multipliers(state.params, tc)
    sinks = list(sinks)
    while state.epoch < tc.epochs:
        order = epoch_order(n, tc.seed, state.epoch)
        first = state.step - state.epoch * per_epoch
        losses = state.epoch_losses
        for b in range(first, per_epoch):
            if max_steps is not None and state.step >= max_steps:
                return state
            idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            x, y = train.images[idx], train.labels[idx]
            rng = step_rng(tc.seed, state.step)
            if tc.flip_augment:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
            masks = M.sample_masks(config, len(idx), rng, x.dtype) if config.dropout > 0 else None
            loss, grads, _ = M.loss_and_grads(config, state.params, x, y, masks, backend)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {state.epoch + 1}, batch {b}, "
                                     f"step {state.step}")
            sgd_step(state.params, grads, state.velocity, state.lr, state.momentum, mults, tc.weight_decay)
            state.step += 1
            losses.append(loss)
            if on_step is not None:
                on_step(state, loss)
        state.epoch += 1
        rec = {"epoch": state.epoch, "split": "train", "loss": float(np.mean(losses)), "lr": state.lr}
        state.history.append(rec)
        emit(rec, sinks)
        if val is not None and len(val):
            m = evaluate(config, state.params, val, backend=backend)
            rec = {"epoch": state.epoch, "split": "val", "loss": m["loss"], "top1": m["top1"],
                   "top5": m.get("top5"), "lr": state.lr}
            state.history.append(rec)
            emit(rec, sinks)
            lr_schedule(state, m["top1"], tc.patience)
        state.epoch_losses = []
    return state


def make_checkpoint(run, state: TrainState, mean=None) -> Checkpoint:
    return Checkpoint(run, state.params, state.velocity, state.meta(), mean)
