"""The full network: conv frontend -> pooled pyramid -> HRNN -> FC head."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import convnet, head, hrnn
from .convnet import ConvLayerSpec
from .tensor import DTYPE, ShapeError, cross_entropy, dropout_mask, glorot_uniform


def default_conv() -> tuple[ConvLayerSpec, ...]:
    # 24x24 -> 12x12 -> 6x6, depth 32
    return (
        ConvLayerSpec(16, 5, 1, 2, True, (2, 2)),
        ConvLayerSpec(32, 5, 1, 2, True, (2, 2)),
    )


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    image_size: int = 24
    conv: tuple[ConvLayerSpec, ...] = field(default_factory=default_conv)
    scales: tuple[tuple[int, int], ...] = ((1, 1), (2, 2), (3, 3), (6, 6))
    cell: str = hrnn.SRN
    fc: tuple[int, ...] = (256, 256)
    n_classes: int = 2
    dropout: float = 0.5
    use_hrnn: bool = True

    @property
    def depth(self) -> int:
        return self.conv[-1].out_channels

    @property
    def hidden(self) -> int:
        return self.depth

    @property
    def map_size(self) -> int:
        s = self.image_size
        for spec in self.conv:
            s = spec.output_size(s)
        return s

    @property
    def concat_width(self) -> int:
        return sum(r * c for r, c in self.scales) * self.hidden

    def validate(self) -> "ModelConfig":
        if self.cell not in hrnn.CELLS:
            raise ValueError(f"cell must be one of {hrnn.CELLS}, got {self.cell!r}")
        if not self.conv:
            raise ValueError("at least one conv layer is required")
        m = self.map_size
        if not self.scales or tuple(self.scales[0]) != (1, 1):
            raise ValueError(f"scales must start with 1x1, got {self.scales}")
        for a, b in zip(self.scales, self.scales[1:]):
            if a[0] * a[1] >= b[0] * b[1]:
                raise ValueError(f"scales must increase strictly in region count: {self.scales}")
        for r, c in self.scales:
            if r > m or c > m:
                raise ValueError(f"scale {r}x{c} larger than the {m}x{m} conv map")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        return self


def init_params(config: ModelConfig, seed: int = 0, dtype=DTYPE) -> dict[str, np.ndarray]:
    """Seeded initial parameters for every layer."""
    config.validate()
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    cin = config.in_channels
    for i, spec in enumerate(config.conv, start=1):
        k = spec.kernel
        p[f"conv{i}.W"] = glorot_uniform(rng, (spec.out_channels, cin, k, k), cin * k * k,
                                         spec.out_channels * k * k, dtype)
        p[f"conv{i}.b"] = np.zeros(spec.out_channels, dtype=dtype)
        cin = spec.out_channels
    if config.use_hrnn:
        p.update(hrnn.init_hrnn_params(rng, config.scales, config.hidden, config.depth, config.cell, dtype))
    p.update(head.init_head_params(rng, config.concat_width, config.fc, config.n_classes, dtype))
    return p


@dataclass
class Masks:
    levels: list
    fc: list


def sample_masks(config: ModelConfig, batch: int, rng: np.random.Generator, dtype=DTYPE) -> Masks:
    """Inverted-dropout masks for the scale outputs and every hidden FC layer."""
    rate = config.dropout
    levels = [dropout_mask(rng, (batch, r, c, config.hidden), rate, dtype) for r, c in config.scales]
    fc = [dropout_mask(rng, (batch, g), rate, dtype) for g in config.fc]
    return Masks(levels, fc)


def forward(config: ModelConfig, params: Mapping[str, np.ndarray], x: np.ndarray,
            masks: Masks | None = None, backend=None):
    """Class probabilities for images ``x`` (B, C, H, W). Returns ``(probs, cache)``."""
    if x.ndim != 4 or x.shape[1:] != (config.in_channels, config.image_size, config.image_size):
        raise ShapeError(f"expected images (B, {config.in_channels}, {config.image_size}, "
                         f"{config.image_size}), got {x.shape}")
    a = x
    conv_caches = []
    for i, spec in enumerate(config.conv, start=1):
        a, c = convnet.conv_layer_forward(a, params[f"conv{i}.W"], params[f"conv{i}.b"], spec)
        conv_caches.append(c)
    levels, pool_caches = convnet.build_pyramid(a, config.scales)
    level_masks = masks.levels if masks is not None else None
    if config.use_hrnn:
        outs, hcache = hrnn.hrnn_forward(levels, params, config.cell, level_masks, backend)
    else:
        # plain spatial pyramid pooling: pooled grids go straight to the head
        outs = levels if level_masks is None else [g * m for g, m in zip(levels, level_masks)]
        hcache = None
    H = head.concat_scales(outs)
    probs, hd_cache = head.head_forward(H, params, masks.fc if masks is not None else None)
    return probs, {"conv": conv_caches, "pool": pool_caches, "hrnn": hcache, "head": hd_cache,
                   "level_shapes": [o.shape for o in outs], "level_masks": level_masks}


def backward(config: ModelConfig, params: Mapping[str, np.ndarray], probs: np.ndarray, labels: np.ndarray,
             cache) -> dict[str, np.ndarray]:
    """Gradients of the mean cross-entropy w.r.t. every parameter."""
    dH, grads = head.head_loss_backward(probs, labels, cache["head"], params)
    douts = head.split_scales(dH, cache["level_shapes"])
    if cache["hrnn"] is not None:
        dlevels, g = hrnn.hrnn_backward(douts, cache["hrnn"], params)
        grads.update(g)
    else:
        m = cache["level_masks"]
        dlevels = douts if m is None else [d * k for d, k in zip(douts, m)]
    d = convnet.build_pyramid_backward(dlevels, cache["pool"])
    for i in range(len(config.conv), 0, -1):
        d, dW, db = convnet.conv_layer_backward(d, cache["conv"][i - 1], need_dx=i > 1)
        grads[f"conv{i}.W"] = dW
        grads[f"conv{i}.b"] = db
    return grads


def loss_and_grads(config: ModelConfig, params: Mapping[str, np.ndarray], x: np.ndarray, labels: np.ndarray,
                   masks: Masks | None = None, backend=None):
    probs, cache = forward(config, params, x, masks, backend)
    loss = float(cross_entropy(probs, labels))
    return loss, backward(config, params, probs, labels, cache), probs


def predict(config: ModelConfig, params: Mapping[str, np.ndarray], x: np.ndarray, batch_size: int = 256,
            backend=None) -> np.ndarray:
    """Eval-mode probabilities, computed in chunks."""
    out = [forward(config, params, x[i:i + batch_size], None, backend)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.empty((0, config.n_classes))


def tiny_config(cell: str = hrnn.SRN, hidden: int = 6, scales=((1, 1), (3, 3)), n_classes: int = 3,
                fc=(8, 8)) -> ModelConfig:
    """Small model for gradient checks: 1x6x6 input, one conv layer, 3x3 map."""
    return ModelConfig(in_channels=1, image_size=6, conv=(ConvLayerSpec(hidden, 3, 1, 1, True, (2, 2)),),
                       scales=tuple(tuple(s) for s in scales), cell=cell, fc=tuple(fc), n_classes=n_classes,
                       dropout=0.5).validate()


def with_overrides(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw).validate()
