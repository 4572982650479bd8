"""Training and evaluation loop.

One step: forward the whole batch, mine pairs and select channels for the
discrimination loss, score the embeddings against the center bank, combine
``lambda1 * L_mfc + lambda2 * L_disc`` and take a plain SGD step on the
extractor weights and the centers together.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import mfcc, sfd
from .config import TrainConfig, effective_config
from .data import Dataset, DatasetError, augment_resample
from .extractor import Extractor, build_extractor, embed, forward_maps
from .mfcc import CenterBank
from .numcore import Tape, backward

__all__ = [
    "Model",
    "StepReport",
    "EvalReport",
    "NonFiniteLossError",
    "build_model",
    "make_batches",
    "lr_at",
    "train_step",
    "evaluate",
    "fit",
    "subseed",
]

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, terms: dict):
        self.step = step
        self.terms = terms
        detail = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


def subseed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class Model:
    extractor: Extractor
    bank: CenterBank
    config: TrainConfig

    def parameters(self) -> dict:
        """Named arrays, live references into the model."""
        return {**self.extractor.params, "centers": self.bank.centers}

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name == "centers":
            self.bank.centers = value
        else:
            self.extractor.params[name] = value

    def embed(self, images) -> np.ndarray:
        return embed(self.extractor, forward_maps(self.extractor, images), training=False).data

    def predict(self, images) -> np.ndarray:
        return np.atleast_1d(mfcc.predict(self.embed(images), self.bank))


def build_model(cfg: TrainConfig, num_classes: int) -> Model:
    """Extractor and center bank for ``cfg`` after applying its ablation."""
    eff = effective_config(cfg)
    eff.validate(num_classes)
    ext = build_extractor(eff.extractor, subseed(eff.seed, 1))
    c = eff.centers
    bank = mfcc.init_centers(
        eff.extractor.embed_dim, num_classes, c.centers_per_class, subseed(eff.seed, 2),
        scale=c.scale, delta=c.delta, global_orthogonal=c.global_orthogonal,
    )
    return Model(ext, bank, eff)


def make_batches(ds: Dataset, cfg: TrainConfig, epoch: int) -> list:
    """Class-balanced index batches for one epoch.

    Every batch holds ``batch_size // N`` samples of each class; the epoch
    runs until the largest class has been covered once, smaller classes wrap
    around with fresh permutations.
    """
    N = ds.num_classes
    per_class = cfg.batch_size // N
    counts = ds.class_counts()
    if per_class < 2:
        raise DatasetError(f"batch_size {cfg.batch_size} leaves fewer than 2 samples per class")
    if np.any(counts < 2):
        raise DatasetError(f"every class needs >= 2 samples, counts are {counts.tolist()}")
    rng = np.random.default_rng([cfg.seed, 3, epoch])
    n_batches = int(math.ceil(counts.max() / per_class))
    need = n_batches * per_class
    streams = []
    for k in range(N):
        idx = np.flatnonzero(ds.labels == k)
        parts, total = [], 0
        while total < need:
            parts.append(rng.permutation(idx))
            total += idx.size
        streams.append(np.concatenate(parts)[:need])
    batches = []
    for b in range(n_batches):
        chunk = np.concatenate([s[b * per_class:(b + 1) * per_class] for s in streams])
        batches.append(rng.permutation(chunk))
    return batches


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up reaching ``lr0`` at ``warmup_epochs``, then step decay."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch < cfg.warmup_epochs:
        return cfg.lr0 * (epoch + 1) / cfg.warmup_epochs
    return cfg.lr0 * cfg.decay_factor ** ((epoch - cfg.warmup_epochs) // cfg.decay_every_epochs)


@dataclass
class StepReport:
    l_disc: float
    l_mfc: float
    total: float
    grad_norm: float


def train_step(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    lr: float,
    rng: Optional[np.random.Generator] = None,
    step: int = 0,
) -> StepReport:
    """Forward, combined loss, backward and an SGD update, in place on ``model``."""
    cfg = model.config
    ext = model.extractor
    labels = np.asarray(labels)
    use_disc = cfg.lambda2 != 0.0
    # overflow is caught below as a non-finite loss or gradient
    with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
        watched = {name: tape.watch(arr) for name, arr in model.parameters().items()}
        maps = forward_maps(ext, images, params=watched)
        v = embed(ext, maps, training=True, rng=rng, params=watched)
        scores = mfcc.sim_scores(v, model.bank, centers=watched["centers"])
        l_mfc = mfcc.mfcc_loss(mfcc.class_probs(scores, model.bank, labels))
        total = l_mfc * cfg.lambda1
        l_disc_value = 0.0
        if use_disc:
            mined = sfd.mine_pairs(v.data, labels)
            selections = sfd.select_all(maps.data, mined)
            l_disc = sfd.disc_loss(maps, mined, selections, cfg.sfd)
            l_disc_value = l_disc.item()
            total = total + l_disc * cfg.lambda2
    terms = {"l_disc": l_disc_value, "l_mfc": l_mfc.item(), "total": total.item()}
    if not all(math.isfinite(t) for t in terms.values()):
        raise NonFiniteLossError(step, terms)
    with np.errstate(over="ignore", invalid="ignore"):
        grads = backward(total, tape)
    sq = 0.0
    updates = {}
    for name, w in watched.items():
        g = grads[w.node_id].data
        sq += float(np.sum(g * g))
        updates[name] = g
    grad_norm = math.sqrt(sq)
    if not math.isfinite(grad_norm):
        raise NonFiniteLossError(step, {**terms, "grad_norm": grad_norm})
    for name, g in updates.items():
        model.set_parameter(name, model.parameters()[name] - lr * g)
    return StepReport(terms["l_disc"], terms["l_mfc"], terms["total"], grad_norm)


@dataclass
class EvalReport:
    predictions: np.ndarray
    labels: np.ndarray
    confusion: np.ndarray  # rows: true class, columns: predicted class
    per_class_recall: list
    micro_accuracy: float
    macro_accuracy: float
    balanced: bool

    @property
    def accuracy(self) -> float:
        return self.micro_accuracy

    def to_dict(self, class_names=None) -> dict:
        names = class_names or [f"class_{k}" for k in range(len(self.per_class_recall))]
        return {
            "accuracy": self.micro_accuracy,
            "micro_accuracy": self.micro_accuracy,
            "macro_accuracy": self.macro_accuracy,
            "balanced": self.balanced,
            "per_class": dict(zip(names, self.per_class_recall)),
            "confusion": self.confusion.tolist(),
        }


def report_from_predictions(predictions, labels, num_classes: int) -> EvalReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    counts = confusion.sum(axis=1)
    recall = [float(confusion[k, k] / counts[k]) if counts[k] else None for k in range(num_classes)]
    present = [r for r in recall if r is not None]
    micro = float(np.trace(confusion) / labels.size)
    macro = float(np.mean(present))
    nonzero = counts[counts > 0]
    return EvalReport(predictions, labels, confusion, recall, micro, macro, bool(np.all(nonzero == nonzero[0])))


def evaluate(model: Model, ds: Dataset, chunk: int = 256) -> EvalReport:
    if len(ds) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    preds = [model.predict(ds.images[i:i + chunk]) for i in range(0, len(ds), chunk)]
    return report_from_predictions(np.concatenate(preds), ds.labels, model.bank.num_classes)


def prepare_train_set(train: Dataset, cfg: TrainConfig) -> Dataset:
    if cfg.data.augment_per_class > 0:
        return augment_resample(train, cfg.data.augment_per_class, subseed(cfg.seed, 4))
    return train


def fit(
    model: Model,
    train: Dataset,
    test: Optional[Dataset] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> list:
    """Run ``cfg.epochs`` epochs of class-balanced SGD; returns the per-epoch records.

    A record is ``{epoch, lr, l_disc, l_mfc, total}`` (step means), plus
    ``eval_accuracy`` on ``test`` every ``eval_every`` epochs and after the
    last one.
    """
    cfg = model.config
    records = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        reports = []
        for b, idx in enumerate(make_batches(train, cfg, epoch)):
            rng = np.random.default_rng([cfg.seed, 5, epoch, b])
            reports.append(train_step(model, train.images[idx], train.labels[idx], lr, rng, step))
            step += 1
        rec = {
            "epoch": epoch,
            "lr": lr,
            "l_disc": float(np.mean([r.l_disc for r in reports])),
            "l_mfc": float(np.mean([r.l_mfc for r in reports])),
            "total": float(np.mean([r.total for r in reports])),
        }
        last = epoch == cfg.epochs - 1
        if test is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            rec["eval_accuracy"] = evaluate(model, test).accuracy
        logger.debug("epoch %d %s", epoch, rec)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return records


def with_ablation(cfg: TrainConfig, ablation: str, **changes) -> TrainConfig:
    return dataclasses.replace(cfg, ablation=ablation, **changes)
