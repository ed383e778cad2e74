"""Convolutional frontend and adaptive max pooling into a region-grid pyramid.

Feature maps are batch-first ``(B, C, H, W)``. Pooled region grids are
``(B, R, C, D)`` so that one region's feature vector is contiguous.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError


@dataclass(frozen=True)
class ConvLayerSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    relu: bool = True
    pool: tuple[int, int] | None = None  # (window, stride)

    def output_size(self, size: int) -> int:
        """Spatial extent after convolution and the optional pooling."""
        out = conv_output_size(size, self.kernel, self.stride, self.pad)
        if self.pool is not None:
            out = conv_output_size(out, self.pool[0], self.pool[1], 0)
        return out


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    padded = size + 2 * pad
    if kernel > padded:
        raise ShapeError(f"kernel {kernel} larger than padded input {padded}")
    return (padded - kernel) // stride + 1


# ------------------------------------------------------------------ conv2d


def conv2d(x: np.ndarray, W: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlate ``x`` (B, Ci, H, W) with kernels ``W`` (Co, Ci, kh, kw).

    float64 inputs take a path that accumulates over (ci, kh, kw) in that
    fixed order and adds the bias last, reproducing a naive scalar loop
    bit for bit. Other dtypes go through im2col and a single matmul.
    Returns ``(out, cache)``.
    """
    if x.ndim != 4 or W.ndim != 4 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {W.shape}")
    B, Ci, H, Wd = x.shape
    Co, _, kh, kw = W.shape
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(Wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = None
    if x.dtype == np.float64:
        out = np.zeros((B, Co, Ho, Wo), dtype=x.dtype)
        for ci in range(Ci):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, ci, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
                    out += W[None, :, ci, i, j, None, None] * patch[:, None]
        out += b[None, :, None, None]
    else:
        cols = _im2col(xp, kh, kw, stride, Ho, Wo)
        out = (cols @ W.reshape(Co, -1).T + b).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, xp, cols, W, stride, pad, Ho, Wo)


def _im2col(xp, kh, kw, stride, Ho, Wo):
    # (B, Ci, Hp-kh+1, Wp-kw+1, kh, kw) -> (B, Ho, Wo, Ci*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    B, Ci = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, Ci * kh * kw)


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Return ``(dx, dW, db)``; ``dx`` is None when ``need_dx`` is False."""
    x_shape, xp, cols, W, stride, pad, Ho, Wo = cache
    Co, Ci, kh, kw = W.shape
    B = x_shape[0]
    if cols is None:
        cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    d = dout.transpose(0, 2, 3, 1).reshape(-1, Co)          # (B*Ho*Wo, Co)
    dW = (d.T @ cols.reshape(-1, Ci * kh * kw)).reshape(W.shape)
    db = d.sum(axis=0)
    if not need_dx:
        return None, dW, db
    if stride == 1:
        # input gradient = full correlation of dout with the flipped kernels
        dpad = np.pad(dout, ((0, 0), (0, 0), (kh - 1 - pad, kh - 1 - pad), (kw - 1 - pad, kw - 1 - pad))) \
            if kh - 1 - pad >= 0 and kw - 1 - pad >= 0 else None
        if dpad is not None:
            H, Wd = x_shape[2:]
            dcols = _im2col(dpad, kh, kw, 1, H, Wd)
            Wf = W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(Ci, -1)
            return np.ascontiguousarray((dcols @ Wf.T).transpose(0, 3, 1, 2)), dW, db
    dcols = (d @ W.reshape(Co, -1)).reshape(B, Ho, Wo, Ci, kh, kw)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]] if pad else dxp
    return np.ascontiguousarray(dx), dW, db


# ---------------------------------------------------------------- max pool


def maxpool2d(x: np.ndarray, window: int, stride: int):
    B, C, H, W = x.shape
    Ho = conv_output_size(H, window, stride, 0)
    Wo = conv_output_size(W, window, stride, 0)
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    win = win.reshape(B, C, Ho, Wo, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, window, stride, arg)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, window, stride, arg = cache
    Ho, Wo = arg.shape[2:]
    dx = np.zeros(shape, dtype=dout.dtype)
    for i in range(window):
        for j in range(window):
            hit = arg == i * window + j
            dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dout * hit
    return dx


# -------------------------------------------------------- conv layer stack


def conv_layer_forward(x, W, b, spec: ConvLayerSpec):
    out, c_conv = conv2d(x, W, b, spec.stride, spec.pad)
    if spec.relu:
        out = np.maximum(out, 0)
    act = out
    c_pool = None
    if spec.pool is not None:
        out, c_pool = maxpool2d(out, *spec.pool)
    return out, (c_conv, spec, c_pool, act)


def conv_layer_backward(dout, cache, need_dx: bool = True):
    """Return ``(dx, dW, db)`` for one conv [+ ReLU] [+ pool] layer."""
    c_conv, spec, c_pool, act = cache
    if c_pool is not None:
        dout = maxpool2d_backward(dout, c_pool)
    if spec.relu:
        dout = dout * (act > 0)
    return conv2d_backward(dout, c_conv, need_dx)


# ------------------------------------------------- adaptive pooling pyramid


def pool_windows(size: int, bins: int) -> list[tuple[int, int]]:
    """Half-open windows ``[floor(k*size/bins), ceil((k+1)*size/bins))``, k = 0..bins-1."""
    if bins > size:
        raise ShapeError(f"cannot pool extent {size} into {bins} bins")
    return [((k * size) // bins, -((-(k + 1) * size) // bins)) for k in range(bins)]


def adaptive_maxpool(fmap: np.ndarray, target: tuple[int, int]):
    """Max-pool ``fmap`` (B, D, H, W) into an R x C region grid (B, R, C, D).

    Returns ``(grid, cache)``. Ties route the gradient to the first maximum
    in row-major window order.
    """
    B, D, H, W = fmap.shape
    R, C = target
    if R > H or C > W:
        raise ShapeError(f"adaptive_maxpool: target {R}x{C} larger than input {H}x{W}")
    rows, cols = pool_windows(H, R), pool_windows(W, C)
    grid = np.empty((B, R, C, D), dtype=fmap.dtype)
    args = []
    for r, (r0, r1) in enumerate(rows):
        for c, (c0, c1) in enumerate(cols):
            win = fmap[:, :, r0:r1, c0:c1].reshape(B, D, -1)
            a = win.argmax(axis=-1)
            grid[:, r, c] = np.take_along_axis(win, a[..., None], axis=-1)[..., 0]
            args.append(a)
    return grid, (fmap.shape, rows, cols, args)


def adaptive_maxpool_backward(dgrid: np.ndarray, cache) -> np.ndarray:
    shape, rows, cols, args = cache
    B, D = shape[:2]
    dmap = np.zeros(shape, dtype=dgrid.dtype)
    bi, di = np.meshgrid(np.arange(B), np.arange(D), indexing="ij")
    k = 0
    for r, (r0, r1) in enumerate(rows):
        for c, (c0, c1) in enumerate(cols):
            a = args[k]
            k += 1
            width = c1 - c0
            np.add.at(dmap, (bi, di, r0 + a // width, c0 + a % width), dgrid[:, r, c])
    return dmap


def build_pyramid(fmap: np.ndarray, targets) -> tuple[list[np.ndarray], list]:
    """One adaptive max pool per target, coarse to fine. First target must be 1x1."""
    targets = [tuple(t) for t in targets]
    if not targets or targets[0] != (1, 1):
        raise ShapeError(f"pyramid targets must start at 1x1, got {targets}")
    for a, b in zip(targets, targets[1:]):
        if a[0] * a[1] >= b[0] * b[1]:
            raise ShapeError(f"pyramid targets must grow strictly in region count: {targets}")
    levels, caches = [], []
    for t in targets:
        g, c = adaptive_maxpool(fmap, t)
        levels.append(g)
        caches.append(c)
    return levels, caches


def build_pyramid_backward(dlevels, caches) -> np.ndarray:
    dmap = None
    for d, c in zip(dlevels, caches):
        part = adaptive_maxpool_backward(d, c)
        dmap = part if dmap is None else dmap + part
    return dmap
