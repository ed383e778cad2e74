"""Pure-NumPy scan kernels (fallback for the compiled ``_scan_ext``).

All kernels scan top-left to bottom-right. Arrays are laid out
``(R, C, B, F)``: one grid cell holds a contiguous batch of vectors.
``pre`` carries everything that does not depend on the recurrence
(input projection, bias and scale context), so the kernels only add the
row- and column-predecessor terms. Out-of-grid predecessors are zero.

Gate blocks in the LSTM kernels are ordered (i, f, o, g).
"""
import numpy as np


def srn_forward(pre, W_row, W_col):
    R, C = pre.shape[:2]
    h = np.empty_like(pre)
    for r in range(R):
        for c in range(C):
            z = pre[r, c].copy()
            if r > 0:
                z += h[r - 1, c] @ W_row.T
            if c > 0:
                z += h[r, c - 1] @ W_col.T
            np.maximum(z, 0, out=h[r, c])
    return h


def srn_backward(dh, h, W_row, W_col):
    """Gradient w.r.t. ``pre`` given the upstream gradient on ``h``."""
    R, C = h.shape[:2]
    g = dh.copy()
    for r in range(R - 1, -1, -1):
        for c in range(C - 1, -1, -1):
            gz = g[r, c]
            gz *= h[r, c] > 0
            if r > 0:
                g[r - 1, c] += gz @ W_row
            if c > 0:
                g[r, c - 1] += gz @ W_col
    return g


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(pre, W_row, W_col):
    """Returns ``(h, c, gates)``; ``gates`` holds the activated (i, f, o, g)."""
    R, C, B, G = pre.shape
    H = G // 4
    h = np.zeros((R, C, B, H), dtype=pre.dtype)
    mem = np.zeros_like(h)
    gates = np.empty_like(pre)
    for r in range(R):
        for c in range(C):
            z = pre[r, c].copy()
            cprev = np.zeros((B, H), dtype=pre.dtype)
            if r > 0:
                z += h[r - 1, c] @ W_row.T
                cprev += mem[r - 1, c]
            if c > 0:
                z += h[r, c - 1] @ W_col.T
                cprev += mem[r, c - 1]
            a = gates[r, c]
            a[:, :3 * H] = _sigmoid(z[:, :3 * H])
            a[:, 3 * H:] = np.tanh(z[:, 3 * H:])
            i, f, o, gg = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            mem[r, c] = f * cprev + i * gg
            h[r, c] = o * np.tanh(mem[r, c])
    return h, mem, gates


def lstm_backward(dh, h, mem, gates, W_row, W_col):
    R, C, B, H = h.shape
    dh_acc = dh.copy()
    dc_acc = np.zeros_like(mem)
    dz = np.empty_like(gates)
    for r in range(R - 1, -1, -1):
        for c in range(C - 1, -1, -1):
            a = gates[r, c]
            i, f, o, gg = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            cprev = np.zeros((B, H), dtype=h.dtype)
            if r > 0:
                cprev += mem[r - 1, c]
            if c > 0:
                cprev += mem[r, c - 1]
            tc = np.tanh(mem[r, c])
            dhv = dh_acc[r, c]
            dcv = dc_acc[r, c] + dhv * o * (1 - tc * tc)
            d = dz[r, c]
            d[:, :H] = dcv * gg * i * (1 - i)
            d[:, H:2 * H] = dcv * cprev * f * (1 - f)
            d[:, 2 * H:3 * H] = dhv * tc * o * (1 - o)
            d[:, 3 * H:] = dcv * i * (1 - gg * gg)
            dcp = dcv * f
            if r > 0:
                dc_acc[r - 1, c] += dcp
                dh_acc[r - 1, c] += d @ W_row
            if c > 0:
                dc_acc[r, c - 1] += dcp
                dh_acc[r, c - 1] += d @ W_col
    return dz
