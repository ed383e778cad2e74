"""Hierarchical recurrent layers over a coarse-to-fine region-grid pyramid.

Every scanned scale runs four directional 2D scans (simple ReLU cells or
LSTM cells) whose hidden grids are summed. A fine scale also receives an
additive context vector at each cell, a sum of linear maps of the fused
hidden vectors at the coarser cells covering it. The coarsest level is a
single globally pooled vector; it is never scanned and feeds the context
of every finer scale directly.

Grids are batch-first ``(B, R, C, F)``. Parameters live in a flat dict:

``hrnn.s{l}.{dir}.W_row | W_col | W_x | b``
    per scanned scale ``l`` (1-based) and direction ``dir``. For LSTM
    cells the four gates are stacked along the first axis in the order
    (i, f, o, g), so ``W_row`` is ``(4H, H)`` and ``b`` is ``(4H,)``.
``hrnn.cross.{j}to{l}``
    ``(H, H)`` map from scale ``j`` to finer scale ``l``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .tensor import DTYPE, ContractError, ShapeError, glorot_uniform

SRN = "srn"
LSTM = "lstm"
CELLS = (SRN, LSTM)


class Direction(enum.Enum):
    """Scan order over a grid; value is the short name used in parameter keys."""

    SE = "se"  # top-left -> bottom-right, predecessors (r-1, c), (r, c-1)
    NW = "nw"  # bottom-right -> top-left, predecessors (r+1, c), (r, c+1)
    NE = "ne"  # bottom-left -> top-right, predecessors (r+1, c), (r, c-1)
    SW = "sw"  # top-right -> bottom-left, predecessors (r-1, c), (r, c+1)

    @property
    def flip_rows(self) -> bool:
        return self in (Direction.NW, Direction.NE)

    @property
    def flip_cols(self) -> bool:
        return self in (Direction.NW, Direction.SW)

    @property
    def arrow(self) -> str:
        return {"se": "↘", "nw": "↖", "ne": "↗", "sw": "↙"}[self.value]


DIRECTIONS: tuple[Direction, ...] = tuple(Direction)


def orient(a: np.ndarray, direction: Direction) -> np.ndarray:
    """Flip a batch-first grid so that ``direction`` becomes a top-left scan.

    The flip is its own inverse, so the same call maps results back.
    """
    if direction.flip_rows:
        a = a[:, ::-1]
    if direction.flip_cols:
        a = a[:, :, ::-1]
    return a


def _to_kernel(a: np.ndarray, dtype) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(1, 2, 0, 3), dtype=dtype)


def _from_kernel(a: np.ndarray) -> np.ndarray:
    return a.transpose(2, 0, 1, 3)


def _batched(grid: np.ndarray) -> tuple[np.ndarray, bool]:
    if grid.ndim == 3:
        return grid[None], True
    if grid.ndim == 4:
        return grid, False
    raise ShapeError(f"expected an (R, C, D) grid or a (B, R, C, D) batch, got shape {grid.shape}")


# ------------------------------------------------------- directional scans


def _gates(cell: str) -> int:
    return 4 if cell == LSTM else 1


def _check_weights(w: Mapping[str, np.ndarray], cell: str, D: int) -> int:
    G, H = w["W_row"].shape
    if G != _gates(cell) * H or w["W_col"].shape != (G, H) or w["W_x"].shape != (G, D) or w["b"].shape != (G,):
        raise ShapeError(
            f"{cell} weights inconsistent with input depth {D}: "
            + ", ".join(f"{k}{w[k].shape}" for k in ("W_row", "W_col", "W_x", "b")))
    return H


def scan_forward(x: np.ndarray, direction: Direction, w: Mapping[str, np.ndarray], cell: str = SRN,
                 context: np.ndarray | None = None, backend=None):
    """One directional scan over a batch of grids ``x`` (B, R, C, D).

    Returns ``(h, cache)``. The cache also exposes ``mem`` and ``gates`` for
    LSTM cells, in the caller's (unflipped, batch-first) frame.
    """
    kern = kernels.get(backend) if backend is None or isinstance(backend, str) else backend
    B, R, C, D = x.shape
    H = _check_weights(w, cell, D)
    pre = x @ w["W_x"].T + w["b"]
    if context is not None:
        if context.shape != (B, R, C, H):
            raise ShapeError(f"context grid {context.shape} does not match hidden grid {(B, R, C, H)}")
        if cell == LSTM:
            pre = pre.reshape(B, R, C, 4, H) + context[..., None, :]
            pre = pre.reshape(B, R, C, 4 * H)
        else:
            pre = pre + context
    dtype = x.dtype
    W_row = np.ascontiguousarray(w["W_row"], dtype=dtype)
    W_col = np.ascontiguousarray(w["W_col"], dtype=dtype)
    pre_k = _to_kernel(orient(pre, direction), dtype)
    cache = {"x": x, "direction": direction, "cell": cell, "kern": kern,
             "W_row": W_row, "W_col": W_col, "W_x": w["W_x"], "context": context is not None}
    if cell == SRN:
        h_k = kern.srn_forward(pre_k, W_row, W_col)
    elif cell == LSTM:
        h_k, m_k, a_k = kern.lstm_forward(pre_k, W_row, W_col)
        cache["mem_k"], cache["gates_k"] = m_k, a_k
    else:
        raise ValueError(f"unknown cell kind {cell!r}")
    cache["h_k"] = h_k
    return orient(_from_kernel(h_k), direction), cache


def scan_backward(dh: np.ndarray, cache):
    """Backpropagate through one directional scan.

    Returns ``(dx, dcontext, grads)``; ``dcontext`` is None when the forward
    pass had no context, and ``grads`` is keyed W_row, W_col, W_x, b.
    """
    if cache is None or "h_k" not in cache:
        raise ContractError("scan_backward called without a recorded forward pass")
    d = cache["direction"]
    kern = cache["kern"]
    x, h_k = cache["x"], cache["h_k"]
    W_row, W_col = cache["W_row"], cache["W_col"]
    dh_k = _to_kernel(orient(dh, d), h_k.dtype)
    if cache["cell"] == SRN:
        dz_k = kern.srn_backward(dh_k, h_k, W_row, W_col)
    else:
        dz_k = kern.lstm_backward(dh_k, h_k, cache["mem_k"], cache["gates_k"], W_row, W_col)
    R, C, B, G = dz_k.shape
    H = h_k.shape[-1]
    hp = np.zeros_like(h_k)
    hp[1:] = h_k[:-1]
    flat = dz_k.reshape(-1, G).T
    dW_row = flat @ hp.reshape(-1, H)
    hp[:] = 0
    hp[:, 1:] = h_k[:, :-1]
    dW_col = flat @ hp.reshape(-1, H)
    dz = orient(_from_kernel(dz_k), d)
    D = x.shape[-1]
    dW_x = dz.reshape(-1, G).T @ x.reshape(-1, D)
    db = dz.sum(axis=(0, 1, 2))
    dx = dz @ cache["W_x"]
    ds = None
    if cache["context"]:
        ds = dz if cache["cell"] == SRN else dz.reshape(B, R, C, 4, H).sum(axis=3)
    return dx, ds, {"W_row": dW_row, "W_col": dW_col, "W_x": dW_x, "b": db}


def scan_srn(grid: np.ndarray, direction: Direction, w: Mapping[str, np.ndarray],
             context: np.ndarray | None = None, backend=None) -> np.ndarray:
    """Hidden grid of a simple-recurrent scan; accepts (R, C, D) or (B, R, C, D)."""
    x, single = _batched(grid)
    ctx = None if context is None else _batched(context)[0]
    h, _ = scan_forward(x, direction, w, SRN, ctx, backend)
    return h[0] if single else h


def scan_lstm(grid: np.ndarray, direction: Direction, w: Mapping[str, np.ndarray],
              context: np.ndarray | None = None, backend=None) -> tuple[np.ndarray, np.ndarray]:
    """``(hidden grid, memory grid)`` of an LSTM scan; accepts (R, C, D) or (B, R, C, D)."""
    x, single = _batched(grid)
    ctx = None if context is None else _batched(context)[0]
    h, cache = scan_forward(x, direction, w, LSTM, ctx, backend)
    mem = orient(_from_kernel(cache["mem_k"]), direction)
    return (h[0], mem[0]) if single else (h, mem)


# ---------------------------------------------------------- scale context


def source_index(fine: int, coarse: int) -> np.ndarray:
    """0-based coarse row (or column) covering each fine row: ``floor(k * coarse / fine)``."""
    return (np.arange(fine) * coarse) // fine


def cross_name(j: int, l: int) -> str:
    return f"hrnn.cross.{j}to{l}"


def scale_context(fused: Sequence[np.ndarray | None], level: int, params: Mapping[str, np.ndarray],
                  shape: tuple[int, int] | None = None):
    """Context grid for 0-based pyramid ``level`` from all coarser fused grids.

    ``fused[j]`` is the fused hidden batch (B, R_j, C_j, H) of level j; the
    target grid size comes from ``shape`` or ``fused[level]``. Returns
    ``(s, cache)`` with ``s`` shaped (B, R, C, H).
    """
    if level < 1:
        raise ContractError("the coarsest level has no scale context")
    if len(fused) < level or any(f is None for f in fused[:level]):
        missing = [j + 1 for j in range(level) if j >= len(fused) or fused[j] is None]
        raise ContractError(f"scale {level + 1} needs coarser scales {missing} processed first")
    if shape is None:
        shape = fused[level].shape[1:3]
    R, C = shape
    s = None
    terms = []
    for j in range(level):
        src = fused[j]
        ri = source_index(R, src.shape[1])
        ci = source_index(C, src.shape[2])
        gathered = src[:, ri[:, None], ci[None, :], :]
        W = params[cross_name(j + 1, level + 1)]
        if W.shape != (W.shape[0], src.shape[-1]):
            raise ShapeError(f"{cross_name(j + 1, level + 1)} {W.shape} vs source depth {src.shape[-1]}")
        term = gathered @ W.T
        s = term if s is None else s + term
        terms.append((j, ri, ci, gathered))
    return s, terms


def scale_context_backward(ds: np.ndarray, terms, params, dfused: list[np.ndarray], level: int,
                           grads: dict[str, np.ndarray]) -> None:
    """Accumulate context gradients into ``dfused`` (coarser levels) and ``grads``."""
    for j, ri, ci, gathered in terms:
        name = cross_name(j + 1, level + 1)
        W = params[name]
        H = W.shape[0]
        grads[name] = grads.get(name, 0) + ds.reshape(-1, H).T @ gathered.reshape(-1, W.shape[1])
        dg = ds @ W
        # several fine cells may read the same coarse cell
        np.add.at(dfused[j].transpose(1, 2, 0, 3), (ri[:, None], ci[None, :]), dg.transpose(1, 2, 0, 3))


# ------------------------------------------------------------ full module


def param_name(level: int, direction: Direction, field: str) -> str:
    return f"hrnn.s{level}.{direction.value}.{field}"


def direction_weights(params: Mapping[str, np.ndarray], level: int, direction: Direction) -> dict:
    return {f: params[param_name(level, direction, f)] for f in ("W_row", "W_col", "W_x", "b")}


@dataclass
class HrnnCache:
    cell: str
    levels: list
    fused: list
    masks: list
    scans: dict
    contexts: dict


def hrnn_forward(levels: Sequence[np.ndarray], params: Mapping[str, np.ndarray], cell: str = SRN,
                 masks: Sequence[np.ndarray | None] | None = None, backend=None,
                 order: Sequence[Direction] = DIRECTIONS):
    """Run the hierarchy coarse to fine.

    ``levels`` are pooled grids (B, R_l, C_l, D), first one 1x1. Returns
    ``(outputs, cache)`` where ``outputs[l]`` is the fused hidden grid of
    level l times its dropout mask (if any). The unmasked fused grids are
    what finer scales read as context. ``order`` only changes the order in
    which the independent directional scans execute; fusion always sums in
    the canonical SE, NW, NE, SW order.
    """
    if cell not in CELLS:
        raise ValueError(f"unknown cell kind {cell!r}")
    if not levels or levels[0].shape[1:3] != (1, 1):
        raise ContractError("pyramid must be ordered coarse to fine starting with a 1x1 level")
    L = len(levels)
    fused: list[np.ndarray | None] = [None] * L
    fused[0] = levels[0]
    scans, contexts = {}, {}
    for l in range(1, L):
        x = levels[l]
        s, terms = scale_context(fused, l, params, shape=x.shape[1:3])
        contexts[l] = terms
        hs = {}
        for d in order:
            hs[d], scans[(l, d)] = scan_forward(x, d, direction_weights(params, l + 1, d), cell, s, backend)
        fused[l] = hs[Direction.SE] + hs[Direction.NW] + hs[Direction.NE] + hs[Direction.SW]
    masks = list(masks) if masks is not None else [None] * L
    outputs = [f if m is None else f * m for f, m in zip(fused, masks)]
    return outputs, HrnnCache(cell, list(levels), fused, masks, scans, contexts)


def hrnn_backward(doutputs: Sequence[np.ndarray], cache: HrnnCache, params: Mapping[str, np.ndarray]):
    """BPTT through all scales, fine to coarse.

    Returns ``(dlevels, grads)``: gradients w.r.t. the pooled input grids and
    every hrnn parameter.
    """
    if cache is None or not cache.scans and len(cache.levels) > 1:
        raise ContractError("hrnn_backward called without a recorded forward pass")
    L = len(cache.levels)
    dfused = [d if m is None else d * m for d, m in zip(doutputs, cache.masks)]
    dfused = [np.array(d, copy=True) for d in dfused]
    dlevels: list[np.ndarray | None] = [None] * L
    grads: dict[str, np.ndarray] = {}
    for l in range(L - 1, 0, -1):
        dx_total = None
        ds_total = None
        for d in DIRECTIONS:
            dx, ds, g = scan_backward(dfused[l], cache.scans[(l, d)])
            for f, v in g.items():
                grads[param_name(l + 1, d, f)] = v
            dx_total = dx if dx_total is None else dx_total + dx
            ds_total = ds if ds_total is None else ds_total + ds
        dlevels[l] = dx_total
        scale_context_backward(ds_total, cache.contexts[l], params, dfused, l, grads)
    dlevels[0] = dfused[0]
    return dlevels, grads


# ------------------------------------------------------------- parameters


def init_hrnn_params(rng: np.random.Generator, scales: Sequence[tuple[int, int]], hidden: int, depth: int,
                     cell: str = SRN, dtype=DTYPE) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases, forget-gate bias +1 for LSTM cells.

    The fan-in of a scanned unit counts every map feeding its pre-activation:
    row and column predecessors, the input vector and one context term per
    coarser scale. Counting only the ``H`` columns of a single matrix lets
    simple cells grow geometrically along the grid and down the pyramid.
    """
    if hidden != depth:
        raise ShapeError(f"hidden size {hidden} must equal input depth {depth}")
    k = _gates(cell)
    H = hidden
    p: dict[str, np.ndarray] = {}
    for l in range(2, len(scales) + 1):
        fan_in = 2 * H + depth + (l - 1) * H
        for d in DIRECTIONS:
            p[param_name(l, d, "W_row")] = _stacked(rng, k, H, H, fan_in, dtype)
            p[param_name(l, d, "W_col")] = _stacked(rng, k, H, H, fan_in, dtype)
            p[param_name(l, d, "W_x")] = _stacked(rng, k, H, depth, fan_in, dtype)
            b = np.zeros(k * H, dtype=dtype)
            if cell == LSTM:
                b[H:2 * H] = 1.0
            p[param_name(l, d, "b")] = b
    for l in range(2, len(scales) + 1):
        fan_in = 2 * H + depth + (l - 1) * H
        for j in range(1, l):
            p[cross_name(j, l)] = glorot_uniform(rng, (H, H), fan_in, H, dtype)
    return p


def _stacked(rng, k, rows, cols, fan_in, dtype):
    return np.concatenate([glorot_uniform(rng, (rows, cols), fan_in, rows, dtype) for _ in range(k)])


@dataclass(frozen=True)
class ParamCount:
    matrices: int
    matrix_params: int
    biases: int
    scanned_scales: int
    cross_connections: int


def count_parameters(hidden: int, depth: int, scales: Sequence[tuple[int, int]], cell: str = SRN) -> ParamCount:
    """Count transformation matrices and their entries, biases separately.

    Each gate's row, column and input maps count as separate matrices,
    so an LSTM direction holds 12 and a simple direction 3.
    """
    if cell not in CELLS:
        raise ValueError(f"unknown cell kind {cell!r}")
    # a leading 1x1 level is the raw pooled vector and has no scan
    scanned = len(scales) - (1 if scales and tuple(scales[0]) == (1, 1) else 0)
    k = _gates(cell)
    per_dir = 3 * k
    per_dir_params = k * (2 * hidden * hidden + hidden * depth)
    cross = len(scales) * (len(scales) - 1) // 2
    matrices = scanned * 4 * per_dir + cross
    params = scanned * 4 * per_dir_params + cross * hidden * hidden
    biases = scanned * 4 * k * hidden
    return ParamCount(matrices, params, biases, scanned, cross)
