"""Array primitives, activations and the finite-difference gradient checker.

Training runs in float32. The float64 "oracle" mode exists so that
:func:`gradcheck` has enough precision to be meaningful, and so that the
reference primitives can be compared bit-for-bit against scalar loops.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float32
ORACLE_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A call violated an ordering or state precondition."""


class NumericalError(ArithmeticError):
    """A computation produced NaN or Inf."""


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NumericalError(f"non-finite value in {what} at index {tuple(int(i) for i in bad)}")
    return x


def matvec(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return ``W @ x`` accumulated column by column.

    The summation order is fixed (j = 0, 1, ...) so the result is
    reproducible and equal to a plain scalar loop in float64.
    """
    W = np.asarray(W)
    x = np.asarray(x)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: cannot multiply W{W.shape} by x{x.shape}")
    y = np.zeros(W.shape[0], dtype=np.result_type(W, x))
    for j in range(W.shape[1]):
        y += W[:, j] * x[j]
    return y


def matvec_backward(W: np.ndarray, x: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``y = W @ x``: returns ``(dW, dx)`` with ``dW = dy ⊗ x``."""
    if dy.shape != (W.shape[0],):
        raise ShapeError(f"matvec_backward: upstream {dy.shape} does not match output ({W.shape[0]},)")
    return np.outer(dy, x), W.T @ dy


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """``y`` is the forward output (or input; the sign pattern is the same)."""
    return dy * (y > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1 - y)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (1 - y * y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


PROB_FLOOR = 1e-12


def cross_entropy(probs: np.ndarray, labels) -> np.ndarray:
    """Mean negative log-likelihood of integer ``labels`` (0-based) under ``probs``.

    ``probs`` may be a single distribution or a batch of them.
    """
    probs = np.asarray(probs)
    single = probs.ndim == 1
    p2 = probs[None] if single else probs
    lab = np.atleast_1d(np.asarray(labels))
    n = p2.shape[-1]
    if lab.shape[0] != p2.shape[0]:
        raise ShapeError(f"cross_entropy: {lab.shape[0]} labels for {p2.shape[0]} samples")
    if np.any(lab < 0) or np.any(lab >= n):
        raise ValueError(f"cross_entropy: label out of range [0, {n - 1}]: {lab.tolist()}")
    picked = p2[np.arange(p2.shape[0]), lab]
    return np.mean(-np.log(np.maximum(picked, PROB_FLOOR)))


def softmax_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Fused gradient of mean cross-entropy w.r.t. the logits: ``(p - onehot) / B``."""
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), labels] -= 1
    return grad / probs.shape[0]


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
                   dtype=DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype=DTYPE) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, else ``1/(1-rate)``."""
    if rate <= 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


# ---------------------------------------------------------------- gradcheck


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps coordinates whose true gradient is zero from producing
    huge ratios out of finite-difference round-off.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class GroupResult:
    name: str
    worst_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradcheckReport:
    tolerance: float
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def worst(self) -> GroupResult | None:
        return max(self.groups, key=lambda g: g.worst_error, default=None)

    @property
    def passed(self) -> bool:
        return all(g.worst_error <= self.tolerance for g in self.groups)

    def failures(self) -> list[GroupResult]:
        return [g for g in self.groups if g.worst_error > self.tolerance]

    def __str__(self) -> str:
        lines = []
        for g in self.groups:
            flag = "ok" if g.worst_error <= self.tolerance else "FAIL"
            lines.append(f"{flag:4s} {g.name:32s} max_rel_err={g.worst_error:.3e} at {g.worst_index} "
                         f"(analytic={g.analytic:.6e} numeric={g.numeric:.6e}, n={g.checked})")
        return "\n".join(lines)


def gradcheck(f: Callable[[], float], params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              eps: float = 1e-5, tol: float = 1e-3, max_coords: int | None = None,
              rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare analytic ``grads`` with central differences of ``f``.

    ``f`` re-evaluates the scalar objective from the *current* contents of
    ``params``; each coordinate is nudged in place and restored afterwards.
    Parameters must be float64. ``max_coords`` caps the number of coordinates
    sampled per parameter (all of them when None).
    """
    report = GradcheckReport(tolerance=tol)
    for name, theta in params.items():
        if theta.dtype != np.float64:
            raise ContractError(f"gradcheck needs float64 parameters, {name} is {theta.dtype}")
        if name not in grads:
            raise ContractError(f"no analytic gradient recorded for {name}")
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        flat = theta.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            numeric[n] = (fp - fm) / (2 * eps)
        analytic = g.reshape(-1)[idx]
        err = relative_error(analytic, numeric)
        k = int(np.argmax(err))
        report.groups.append(GroupResult(
            name=name, worst_error=float(err[k]),
            worst_index=tuple(int(v) for v in np.unravel_index(idx[k], theta.shape)),
            analytic=float(analytic[k]), numeric=float(numeric[k]), checked=int(idx.size)))
    return report
