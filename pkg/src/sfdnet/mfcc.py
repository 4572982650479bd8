"""Multi-feature-center cosine classifier.

Each of the N classes owns H learnable centers, stored as columns of a
``[C, N*H]`` matrix with column ``m*H + j`` holding center j of class m. A
sample's scaled cosines to all centers go through one softmax; a class's
probability is the softmax mass summed over its H centers. During training,
a correctly predicted sample has ``delta`` taken off its true-class
probability before the log.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numcore as nc
from .numcore import Tensor

__all__ = [
    "CenterBank",
    "ClassProbs",
    "InfeasibleDimensionError",
    "RestartBudgetError",
    "init_centers",
    "gram_schmidt",
    "sim_scores",
    "class_probs",
    "mfcc_loss",
    "predict",
]

LOG_FLOOR = 1e-12


class InfeasibleDimensionError(ValueError):
    pass


class RestartBudgetError(RuntimeError):
    pass


@dataclass
class CenterBank:
    centers: np.ndarray  # [C, N*H]
    num_classes: int
    centers_per_class: int
    scale: float = 16.0
    delta: float = 0.1

    @property
    def dim(self) -> int:
        return self.centers.shape[0]

    @property
    def gamma(self) -> int:
        return self.num_classes * self.centers_per_class

    def class_block(self, m: int) -> np.ndarray:
        H = self.centers_per_class
        return self.centers[:, m * H:(m + 1) * H]


@dataclass
class ClassProbs:
    """Integrated class probabilities for one sample or a batch.

    ``probs`` is the pre-margin distribution; ``adjusted`` has ``delta``
    removed from the true class wherever ``margin_applied`` is set.
    """

    probs: Tensor
    adjusted: Tensor
    predicted: np.ndarray
    margin_applied: np.ndarray
    labels: Optional[np.ndarray] = None


def gram_schmidt(
    rng: np.random.Generator,
    dim: int,
    count: int,
    basis: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    max_restarts: int = 100,
) -> np.ndarray:
    """Draw ``count`` orthonormal columns, orthogonal to ``basis`` too.

    Modified Gram-Schmidt with one re-orthogonalisation pass; a draw whose
    residual norm falls below ``tol`` is discarded and redrawn.
    """
    done = [] if basis is None else [basis[:, i] for i in range(basis.shape[1])]
    out = []
    restarts = 0
    while len(out) < count:
        v = rng.standard_normal(dim)
        for _ in range(2):
            for q in done:
                v = v - (q @ v) * q
        norm = np.linalg.norm(v)
        if norm < tol:
            restarts += 1
            if restarts > max_restarts:
                raise RestartBudgetError(f"gave up after {max_restarts} near-dependent draws")
            continue
        q = v / norm
        done.append(q)
        out.append(q)
    return np.stack(out, axis=1) if out else np.zeros((dim, 0))


def init_centers(
    C: int,
    N: int,
    H: int,
    seed: int,
    scale: float = 16.0,
    delta: float = 0.1,
    global_orthogonal: bool = False,
) -> CenterBank:
    if H < 1 or N < 1:
        raise ValueError(f"need N >= 1 and H >= 1, got N={N}, H={H}")
    if C < H:
        raise InfeasibleDimensionError(f"cannot fit {H} orthogonal centers in dimension {C}")
    if global_orthogonal and C < N * H:
        raise InfeasibleDimensionError(f"global orthogonality needs C >= N*H = {N * H}, got C={C}")
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(N):
        basis = np.concatenate(blocks, axis=1) if (global_orthogonal and blocks) else None
        blocks.append(gram_schmidt(rng, C, H, basis=basis))
    return CenterBank(np.concatenate(blocks, axis=1), N, H, float(scale), float(delta))


def _centers(bank: CenterBank, centers) -> Tensor:
    if centers is None:
        return Tensor(bank.centers)
    return centers if isinstance(centers, Tensor) else Tensor(centers)


def sim_scores(v, bank: CenterBank, centers: Optional[Tensor] = None) -> Tensor:
    """Cosines to every center, shaped ``[N, H]`` (or ``[B, N, H]`` for a batch).

    ``centers`` overrides ``bank.centers``, e.g. with a tape-watched copy.
    """
    v = v.values if hasattr(v, "values") else v
    v = v if isinstance(v, Tensor) else Tensor(v)
    single = v.ndim == 1
    if single:
        v = nc.reshape(v, (1, -1))
    if v.shape[1] != bank.dim:
        raise nc.ShapeError(f"feature length {v.shape[1]} does not match center dimension {bank.dim}")
    u = nc.l2_normalize(v, axis=1)
    c = nc.l2_normalize(_centers(bank, centers), axis=0)
    s = nc.matmul(u, c)
    shape = (bank.num_classes, bank.centers_per_class)
    return nc.reshape(s, shape if single else (v.shape[0],) + shape)


def _argmax_rows(x: np.ndarray) -> np.ndarray:
    return np.argmax(x, axis=-1)


def class_probs(scores, bank: CenterBank, true_label=None) -> ClassProbs:
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    single = scores.ndim == 2
    N, H = bank.num_classes, bank.centers_per_class
    flat = nc.reshape(scores, (-1, N * H))
    B = flat.shape[0]
    mass = nc.softmax_rows(flat * bank.scale)
    probs = nc.sum_(nc.reshape(mass, (B, N, H)), axis=2)
    predicted = _argmax_rows(probs.data)
    if true_label is None:
        applied = np.zeros(B, dtype=bool)
        labels = None
        adjusted = probs
    else:
        labels = np.atleast_1d(np.asarray(true_label, dtype=int))
        if labels.shape != (B,):
            raise nc.ShapeError(f"{B} score rows but {labels.size} labels")
        if np.any((labels < 0) | (labels >= N)):
            raise ValueError(f"labels must lie in [0, {N}), got {labels.tolist()}")
        applied = predicted == labels
        shift = np.zeros((B, N))
        shift[np.arange(B), labels] = bank.delta * applied
        adjusted = probs - shift
    if single:
        probs, adjusted = nc.reshape(probs, (N,)), nc.reshape(adjusted, (N,))
        return ClassProbs(probs, adjusted, int(predicted[0]), bool(applied[0]), labels)
    return ClassProbs(probs, adjusted, predicted, applied, labels)


def mfcc_loss(cp: ClassProbs, labels=None) -> Tensor:
    """Mean over the batch of ``-log max(p_true - margin, 1e-12)``."""
    labels = cp.labels if labels is None else np.atleast_1d(np.asarray(labels, dtype=int))
    if labels is None:
        raise ValueError("mfcc_loss needs labels")
    adj = cp.adjusted
    if adj.ndim == 1:
        adj = nc.reshape(adj, (1, -1))
    B, N = adj.shape
    if labels.shape != (B,) or np.any((labels < 0) | (labels >= N)):
        raise ValueError(f"labels {labels.tolist()} out of range for {N} classes / batch of {B}")
    onehot = np.zeros((B, N))
    onehot[np.arange(B), labels] = 1.0
    p_true = nc.sum_(adj * onehot, axis=1)
    return nc.mean(-nc.log(nc.clamp_min(p_true, LOG_FLOOR)))


def predict(v, bank: CenterBank):
    """Class with the largest integrated softmax mass; ties -> lowest id."""
    return class_probs(sim_scores(v, bank), bank).predicted
