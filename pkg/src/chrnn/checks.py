"""Self-verification routines shared by the CLI and the test-suite."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import hrnn
from . import model as M
from .tensor import GradcheckReport, ORACLE_DTYPE, gradcheck


def model_gradcheck(config: M.ModelConfig, seed: int = 0, batch: int = 2, tol: float = 1e-3,
                    fault: Callable[[dict], None] | None = None, backend=None) -> GradcheckReport:
    """Finite-difference check of every parameter group of a whole model, in float64.

    A fixed set of dropout masks is drawn once so the objective is a
    deterministic function of the parameters. ``fault`` may tamper with the
    analytic gradients before comparison (negative control).
    """
    rng = np.random.default_rng(seed)
    params = M.init_params(config, seed, dtype=ORACLE_DTYPE)
    # non-zero biases so that no unit sits exactly on a ReLU kink
    for k, v in params.items():
        if k.endswith(".b"):
            v += rng.uniform(-0.1, 0.1, size=v.shape)
    # modest inputs keep the softmax away from saturation, where finite differences lose precision
    x = 0.5 * rng.normal(size=(batch, config.in_channels, config.image_size, config.image_size))
    labels = rng.integers(0, config.n_classes, size=batch)
    masks = M.sample_masks(config, batch, rng, ORACLE_DTYPE) if config.dropout > 0 else None

    probs, cache = M.forward(config, params, x, masks, backend)
    grads = M.backward(config, params, probs, labels, cache)
    if fault is not None:
        fault(grads)

    def objective() -> float:
        probs, _ = M.forward(config, params, x, masks, backend)
        picked = probs[np.arange(batch), labels]
        # exact NLL: a probability floor would have zero slope and disagree with the analytic gradient
        return float(np.mean(-np.log(picked)))

    return gradcheck(objective, params, grads, tol=tol)


def degenerate_params(scales: Sequence[tuple[int, int]], hidden: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """Simple-cell weights with zero recurrence, identity input maps, zero biases and no scale links."""
    p = hrnn.init_hrnn_params(np.random.default_rng(0), scales, hidden, hidden, hrnn.SRN, dtype)
    for k, v in p.items():
        if k.endswith(".W_x"):
            v[:] = np.eye(hidden, dtype=dtype)
        else:
            v[:] = 0
    return p


def degeneracy_deviation(trials: int = 100, seed: int = 0, hidden: int = 8,
                         scales: Sequence[tuple[int, int]] = ((1, 1), (2, 2), (3, 3), (6, 6)),
                         perturb: bool = False, zero_input: bool = False, dtype=np.float64,
                         backend=None) -> float:
    """Max |fused - 4 * relu(x)| over random pyramids under the degenerate configuration.

    ``perturb`` sets one recurrent weight non-zero (negative control).
    """
    p = degenerate_params(scales, hidden, dtype)
    if perturb:
        p[hrnn.param_name(len(scales), hrnn.Direction.SE, "W_row")][0, 1] = 0.5
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        levels = [np.zeros((1, r, c, hidden), dtype) if zero_input else rng.normal(size=(1, r, c, hidden)).astype(dtype)
                  for r, c in scales]
        outs, _ = hrnn.hrnn_forward(levels, p, hrnn.SRN, backend=backend)
        for x, h in zip(levels[1:], outs[1:]):
            worst = max(worst, float(np.max(np.abs(h - 4 * np.maximum(x, 0)))))
    return worst
