"""Fully connected classification head over the concatenated scale outputs.

``H -> [FC + ReLU + dropout] x k -> FC -> softmax``. Parameters are named
``head.fc{i}.W / .b`` for the hidden layers and ``head.out.W / .b``.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .tensor import DTYPE, ContractError, ShapeError, glorot_uniform, softmax, softmax_cross_entropy_backward


def concat_scales(grids: Sequence[np.ndarray]) -> np.ndarray:
    """Flatten fused grids (B, R, C, H) scale by scale, cells row-major."""
    if not grids or any(g is None for g in grids):
        raise ContractError("concat_scales needs the output of every scale")
    B = grids[0].shape[0]
    return np.concatenate([g.reshape(B, -1) for g in grids], axis=1)


def split_scales(dH: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    out, k = [], 0
    for s in shapes:
        n = int(np.prod(s[1:]))
        out.append(dH[:, k:k + n].reshape(s))
        k += n
    return out


def init_head_params(rng: np.random.Generator, in_width: int, hidden: Sequence[int], n_classes: int,
                     dtype=DTYPE) -> dict[str, np.ndarray]:
    p = {}
    width = in_width
    for i, g in enumerate(hidden, start=1):
        p[f"head.fc{i}.W"] = glorot_uniform(rng, (g, width), width, g, dtype)
        p[f"head.fc{i}.b"] = np.zeros(g, dtype=dtype)
        width = g
    p["head.out.W"] = glorot_uniform(rng, (n_classes, width), width, n_classes, dtype)
    p["head.out.b"] = np.zeros(n_classes, dtype=dtype)
    return p


def n_hidden_layers(params: Mapping[str, np.ndarray]) -> int:
    k = 0
    while f"head.fc{k + 1}.W" in params:
        k += 1
    return k


def head_forward(H: np.ndarray, params: Mapping[str, np.ndarray], masks: Sequence[np.ndarray | None] | None = None):
    """Class probabilities for a batch of concatenated features ``H`` (B, width).

    ``masks[i]`` is an inverted-dropout mask for hidden layer i (None in eval).
    Returns ``(probs, cache)``.
    """
    k = n_hidden_layers(params)
    masks = list(masks) if masks is not None else [None] * k
    acts = [H]
    a = H
    for i in range(1, k + 1):
        W, b = params[f"head.fc{i}.W"], params[f"head.fc{i}.b"]
        if a.shape[1] != W.shape[1]:
            raise ShapeError(f"head.fc{i}: input width {a.shape[1]} != weight width {W.shape[1]}")
        a = np.maximum(a @ W.T + b, 0)
        if masks[i - 1] is not None:
            a = a * masks[i - 1]
        acts.append(a)
    W, b = params["head.out.W"], params["head.out.b"]
    if a.shape[1] != W.shape[1]:
        raise ShapeError(f"head.out: input width {a.shape[1]} != weight width {W.shape[1]}")
    probs = softmax(a @ W.T + b)
    return probs, (acts, masks)


def head_backward(dlogits: np.ndarray, cache, params: Mapping[str, np.ndarray]):
    """Backprop from logit gradients; returns ``(dH, grads)``."""
    acts, masks = cache
    k = len(acts) - 1
    grads = {}
    W = params["head.out.W"]
    grads["head.out.W"] = dlogits.T @ acts[-1]
    grads["head.out.b"] = dlogits.sum(axis=0)
    d = dlogits @ W
    for i in range(k, 0, -1):
        a = acts[i]
        # a already carries the mask; a > 0 is zero wherever the mask dropped the unit
        if masks[i - 1] is not None:
            d = d * masks[i - 1]
        d = d * (a > 0)
        grads[f"head.fc{i}.W"] = d.T @ acts[i - 1]
        grads[f"head.fc{i}.b"] = d.sum(axis=0)
        d = d @ params[f"head.fc{i}.W"]
    return d, grads


def head_loss_backward(probs: np.ndarray, labels: np.ndarray, cache, params):
    """Fused softmax + mean cross-entropy backward through the whole head."""
    return head_backward(softmax_cross_entropy_backward(probs, labels), cache, params)
