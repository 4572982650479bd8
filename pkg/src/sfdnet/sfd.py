"""Selective feature discrimination.

For every sample in a batch, the hardest partners are mined on the embedding:
the most similar sample of another class and the least similar sample of the
same class. Their feature maps are then compared channel by channel. Channels
where the inter-class partner looks alike (cosine > 0) and channels where the
same-class partner disagrees (cosine < 0) are the only ones penalised, with a
hinge of margin ``psi``.

Pair indices and channel sets are computed from plain arrays, so they reach
the loss as constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

__all__ = [
    "SfdConfig",
    "MinedPairs",
    "ChannelSelection",
    "MiningError",
    "cosine_sim",
    "mine_pairs",
    "channel_cosines",
    "select_channels",
    "select_all",
    "disc_loss",
    "debug_records",
]


class MiningError(ValueError):
    """A sample has no valid inter-class or inner-class partner in the batch."""


@dataclass
class SfdConfig:
    psi: float = 0.1

    def validate(self) -> None:
        if not np.isfinite(self.psi) or self.psi < 0:
            raise ValueError(f"psi must be finite and non-negative, got {self.psi!r}")


@dataclass
class MinedPairs:
    inter_idx: np.ndarray
    inner_idx: np.ndarray
    inter_sim: np.ndarray
    inner_sim: np.ndarray


@dataclass
class ChannelSelection:
    p_neg: np.ndarray  # inter pair, channel cosine > 0
    p_pos: np.ndarray  # inner pair, channel cosine < 0


def _data(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if hasattr(x, "values"):
        return _data(x.values)
    return np.asarray(x, dtype=np.float64)


def cosine_sim(a, b, epsilon: float = 1e-12) -> float:
    a, b = _data(a).ravel(), _data(b).ravel()
    if a.shape != b.shape:
        raise nc.ShapeError(f"cosine_sim length mismatch: {a.shape} vs {b.shape}")
    ua = a / max(np.linalg.norm(a), epsilon)
    ub = b / max(np.linalg.norm(b), epsilon)
    return float(np.clip(np.sum(ua * ub), -1.0, 1.0))


def mine_pairs(vectors, labels, epsilon: float = 1e-12) -> MinedPairs:
    """Hardest inter-class and inner-class partner for every sample.

    ``vectors`` is ``[B, C]`` (array, Tensor, or a list of FeatureVector).
    Ties resolve to the lowest batch index.
    """
    if isinstance(vectors, (list, tuple)):
        v = np.stack([_data(x) for x in vectors])
    else:
        v = _data(vectors)
    y = np.asarray(labels)
    B = v.shape[0]
    if y.shape != (B,):
        raise nc.ShapeError(f"{B} vectors but labels of shape {y.shape}")
    u = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), epsilon)
    sim = np.clip(np.sum(u[:, None, :] * u[None, :, :], axis=-1), -1.0, 1.0)
    same = y[:, None] == y[None, :]
    other = ~same
    np.fill_diagonal(same, False)
    lacking = np.flatnonzero(~other.any(axis=1) | ~same.any(axis=1))
    if lacking.size:
        raise MiningError(f"samples {lacking.tolist()} lack an inter-class or inner-class partner")
    inter_idx = np.argmax(np.where(other, sim, -np.inf), axis=1)
    inner_idx = np.argmin(np.where(same, sim, np.inf), axis=1)
    rows = np.arange(B)
    return MinedPairs(inter_idx, inner_idx, sim[rows, inter_idx], sim[rows, inner_idx])


def channel_cosines(maps_a, maps_b, epsilon: float = 1e-12) -> np.ndarray:
    """Cosine between the flattened ``h x w`` slices of every channel."""
    a, b = _data(maps_a), _data(maps_b)
    if a.shape != b.shape:
        raise nc.ShapeError(f"feature map shapes differ: {a.shape} vs {b.shape}")
    c = a.shape[-1]
    a = a.reshape(*a.shape[:-3], -1, c)
    b = b.reshape(*b.shape[:-3], -1, c)
    na = np.maximum(np.linalg.norm(a, axis=-2), epsilon)
    nb = np.maximum(np.linalg.norm(b, axis=-2), epsilon)
    return np.sum((a / na[..., None, :]) * (b / nb[..., None, :]), axis=-2)


def select_channels(maps_a, maps_b, mode: str) -> np.ndarray:
    """Sorted channel indices: ``inter`` keeps cosine > 0, ``inner`` keeps cosine < 0."""
    cos = channel_cosines(maps_a, maps_b)
    if mode == "inter":
        return np.flatnonzero(cos > 0)
    if mode == "inner":
        return np.flatnonzero(cos < 0)
    raise ValueError(f"mode must be 'inter' or 'inner', got {mode!r}")


def select_all(maps, mined: MinedPairs) -> list:
    m = _data(maps)
    return [
        ChannelSelection(
            select_channels(m[i], m[mined.inter_idx[i]], "inter"),
            select_channels(m[i], m[mined.inner_idx[i]], "inner"),
        )
        for i in range(m.shape[0])
    ]


def _channel_cos_tensor(flat: Tensor, partner_idx: np.ndarray) -> Tensor:
    # flat: unit-normalised [B, hw, c]
    partner = nc.take(flat, partner_idx, axis=0)
    return nc.sum_(flat * partner, axis=1)


def disc_loss(maps, mined: MinedPairs, selections: Sequence[ChannelSelection], cfg: SfdConfig) -> Tensor:
    """Batch-mean hinge over selected-channel similarities.

    ``maps`` is a ``[B, h, w, c]`` tensor (possibly on a tape) or a list of
    per-sample ``[h, w, c]`` maps. An empty channel set contributes 0 to its
    mean term.
    """
    if isinstance(maps, (list, tuple)):
        maps = _stack_maps(maps)
    B, h, w, c = maps.shape
    neg_mask = np.zeros((B, c))
    pos_mask = np.zeros((B, c))
    for i, sel in enumerate(selections):
        neg_mask[i, sel.p_neg] = 1.0
        pos_mask[i, sel.p_pos] = 1.0
    neg_mask /= np.maximum(neg_mask.sum(axis=1, keepdims=True), 1.0)
    pos_mask /= np.maximum(pos_mask.sum(axis=1, keepdims=True), 1.0)

    flat = nc.l2_normalize(nc.reshape(maps, (B, h * w, c)), axis=1)
    inter = _channel_cos_tensor(flat, mined.inter_idx)
    inner = _channel_cos_tensor(flat, mined.inner_idx)
    neg_term = nc.sum_(inter * neg_mask, axis=1)
    pos_term = nc.sum_(inner * pos_mask, axis=1)
    return nc.mean(nc.relu(neg_term + cfg.psi - pos_term))


def _stack_maps(maps) -> Tensor:
    parts = [m.values if hasattr(m, "values") else m for m in maps]
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    h, w, c = parts[0].shape
    # concatenate through the tape: scatter each sample into its batch slot
    out = None
    B = len(parts)
    for i, p in enumerate(parts):
        onehot = np.zeros((B, 1, 1, 1))
        onehot[i] = 1.0
        term = nc.reshape(p, (1, h, w, c)) * onehot
        out = term if out is None else out + term
    return out


def debug_records(mined: MinedPairs, selections: Sequence[ChannelSelection], sample_ids=None) -> str:
    """JSON lines with mined indices and channel sets, one record per sample."""
    ids = range(len(selections)) if sample_ids is None else sample_ids
    lines = []
    for i, (sid, sel) in enumerate(zip(ids, selections)):
        lines.append(json.dumps({
            "sample_id": int(sid),
            "inter_idx": int(mined.inter_idx[i]),
            "inner_idx": int(mined.inner_idx[i]),
            "p_neg": sel.p_neg.tolist(),
            "p_pos": sel.p_pos.tolist(),
        }, sort_keys=True))
    return "\n".join(lines)
