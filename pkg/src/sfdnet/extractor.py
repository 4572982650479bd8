"""Small convolutional backbone: image -> feature maps -> embedding.

Four stages of 3x3 convolutions. The first conv of each stage has stride 2
and the channel count doubles per stage from ``base_channels``, so a
``s x s`` input yields ``s/16 x s/16 x 8*base_channels`` maps. Every conv is
followed by ReLU except the very last one: the returned feature maps are that
conv's pre-activation output, which keeps per-channel cosines signed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numcore as nc
from .numcore import Tensor

__all__ = [
    "ExtractorConfig",
    "ConfigError",
    "FeatureMaps",
    "FeatureVector",
    "Extractor",
    "build_extractor",
    "forward_maps",
    "embed",
]


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


@dataclass
class ExtractorConfig:
    input_size: int = 32
    block_counts: list = field(default_factory=lambda: [1, 1, 1, 1])
    base_channels: int = 4
    embed_dim: int = 64
    dropout_keep: float = 1.0
    map_activation: str = "linear"  # activation on the last conv: "linear" or "relu"

    def validate(self) -> None:
        if not isinstance(self.input_size, int) or self.input_size < 8 or self.input_size % 16:
            raise ConfigError(f"input_size must be >= 8 and divisible by 16, got {self.input_size!r}")
        if len(self.block_counts) != 4 or any(not isinstance(b, int) or b < 1 for b in self.block_counts):
            raise ConfigError(f"block_counts must be 4 positive ints, got {self.block_counts!r}")
        if not isinstance(self.base_channels, int) or self.base_channels < 1:
            raise ConfigError(f"base_channels must be a positive int, got {self.base_channels!r}")
        if not isinstance(self.embed_dim, int) or self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be a positive int, got {self.embed_dim!r}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ConfigError(f"dropout_keep must lie in (0, 1], got {self.dropout_keep!r}")
        if self.map_activation not in ("linear", "relu"):
            raise ConfigError(f"map_activation must be 'linear' or 'relu', got {self.map_activation!r}")

    @property
    def map_channels(self) -> int:
        return self.base_channels * 8

    @property
    def map_size(self) -> int:
        return self.input_size // 16


@dataclass
class FeatureMaps:
    values: Tensor  # [h, w, c]
    sample_id: int = 0


@dataclass
class FeatureVector:
    values: Tensor  # [C]
    sample_id: int = 0


@dataclass
class Extractor:
    """Extractor parameters, keyed by name, plus the layer plan."""

    cfg: ExtractorConfig
    params: dict
    layers: list  # (param prefix, stride)

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def build_extractor(cfg: ExtractorConfig, seed: int) -> Extractor:
    """Weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero; deterministic per seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict = {}
    layers = []
    cin = 1
    for stage, count in enumerate(cfg.block_counts):
        cout = cfg.base_channels * 2 ** stage
        for block in range(count):
            name = f"stage{stage}.conv{block}"
            bound = np.sqrt(6.0 / (9 * cin))
            params[f"{name}.w"] = rng.uniform(-bound, bound, size=(3, 3, cin, cout))
            params[f"{name}.b"] = np.zeros(cout)
            layers.append((name, 2 if block == 0 else 1))
            cin = cout
    bound = np.sqrt(6.0 / cin)
    params["dense.w"] = rng.uniform(-bound, bound, size=(cin, cfg.embed_dim))
    params["dense.b"] = np.zeros(cfg.embed_dim)
    return Extractor(cfg, params, layers)


def _param(e: Extractor, name: str, bound: Optional[dict]) -> Tensor:
    if bound is not None and name in bound:
        return bound[name]
    return Tensor(e.params[name])


def forward_maps(e: Extractor, image, params: Optional[dict] = None) -> Tensor:
    """Run the conv stages.

    ``image`` is ``[s, s, 1]`` or a batch ``[B, s, s, 1]``. ``params`` may map
    parameter names to tape-watched tensors; missing names fall back to the
    stored arrays as constants.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    s = e.cfg.input_size
    if x.shape[-3:] != (s, s, 1):
        raise nc.ShapeError(f"expected image of shape ({s}, {s}, 1), got {x.shape}")
    last = len(e.layers) - 1
    for i, (name, stride) in enumerate(e.layers):
        x = nc.conv2d(x, _param(e, f"{name}.w", params), stride=stride, padding=1)
        x = x + _param(e, f"{name}.b", params)
        if i != last or e.cfg.map_activation == "relu":
            x = nc.relu(x)
    return x


def embed(
    e: Extractor,
    maps,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    params: Optional[dict] = None,
) -> Tensor:
    """GAP -> dense -> dropout. Dropout is inverted and only active in training."""
    m = maps.values if isinstance(maps, FeatureMaps) else maps
    pooled = nc.global_avg_pool(m)
    single = pooled.ndim == 1
    if single:
        pooled = nc.reshape(pooled, (1, -1))
    v = nc.matmul(pooled, _param(e, "dense.w", params)) + _param(e, "dense.b", params)
    keep = e.cfg.dropout_keep
    if training and keep < 1.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(v.shape) < keep) / keep
        v = v * mask
    return nc.reshape(v, (-1,)) if single else v
