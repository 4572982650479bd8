"""Datasets: synthetic multi-modal ship chips, directory loading, resampling.

Synthetic chips are bright soft-edged rectangles on dark clutter with
multiplicative gamma speckle. Class ``k`` is a mixture of
``modes_per_class`` modes; mode ``j`` is drawn at orientation ``j*pi/M`` with
the size level ``(k + j) mod N``. Every size level therefore shows up in
several classes at different orientations, and only the combination of
size and orientation identifies the class. ``inter_class_overlap`` pulls the
size levels toward their common mean, so adjacent levels (and the classes
sharing them) grow closer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "SynthConfig",
    "DatasetError",
    "mode_params",
    "render_chip",
    "synth_generate",
    "load_dir",
    "export_dir",
    "resize_bilinear",
    "augment_resample",
    "split_per_class",
]

IMAGE_SUFFIXES = (".png", ".pgm")


class DatasetError(ValueError):
    """Unreadable, empty, or malformed dataset input."""


@dataclass
class Dataset:
    images: np.ndarray  # [n, s, s, 1] in [0, 1]
    labels: np.ndarray  # [n] ints
    sources: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.sources:
            self.sources = [""] * len(self.labels)
        if not self.class_names:
            n = int(self.labels.max()) + 1 if self.labels.size else 0
            self.class_names = [f"class_{k}" for k in range(n)]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], [self.sources[i] for i in idx], list(self.class_names))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class SynthConfig:
    num_classes: int = 3
    modes_per_class: int = 2
    inter_class_overlap: float = 0.6
    speckle_sigma: float = 0.3
    image_size: int = 32
    samples_per_class: int = 140
    jitter: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.modes_per_class < 1:
            raise ValueError(f"modes_per_class must be >= 1, got {self.modes_per_class}")
        if not 0.0 <= self.inter_class_overlap <= 1.0:
            raise ValueError(f"inter_class_overlap must lie in [0, 1], got {self.inter_class_overlap}")
        if self.speckle_sigma < 0 or self.jitter < 0:
            raise ValueError("speckle_sigma and jitter must be non-negative")
        if self.image_size < 8 or self.samples_per_class < 1:
            raise ValueError("image_size must be >= 8 and samples_per_class >= 1")


def mode_params(cfg: SynthConfig, k: int, j: int) -> dict:
    """Noise-free rendering parameters of mode ``j`` of class ``k`` (pixels, radians)."""
    N = cfg.num_classes
    level = ((k + j) % N) / (N - 1)
    level = 0.5 + (1.0 - cfg.inter_class_overlap) * (level - 0.5)
    s = cfg.image_size
    return {
        "length": s * (0.30 + 0.40 * level),
        "width": s * (0.22 - 0.12 * level),
        "angle": j * np.pi / cfg.modes_per_class,
        "brightness": 0.85,
    }


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def render_chip(size: int, length: float, width: float, angle: float, brightness: float,
                cx: float = 0.0, cy: float = 0.0, background: float = 0.08, edge: float = 0.7) -> np.ndarray:
    """Soft rectangle centred ``(cx, cy)`` pixels off the image centre."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - c - cx, yy - c - cy
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    body = _sigmoid((length / 2 - np.abs(u)) / edge) * _sigmoid((width / 2 - np.abs(v)) / edge)
    return background + (brightness - background) * body


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Class-balanced synthetic dataset, deterministic per ``cfg.seed``.

    Each sample gets its own RNG stream keyed by ``(seed, class, index)``.
    Modes are assigned round-robin so every class holds the same mode mix.
    """
    cfg.validate()
    s = cfg.image_size
    unit = s / 32.0
    images = np.empty((cfg.num_classes * cfg.samples_per_class, s, s, 1))
    labels = np.empty(cfg.num_classes * cfg.samples_per_class, dtype=np.int64)
    sources = []
    n = 0
    for k in range(cfg.num_classes):
        for i in range(cfg.samples_per_class):
            j = i % cfg.modes_per_class
            p = mode_params(cfg, k, j)
            rng = np.random.default_rng([cfg.seed, k, i])
            jit = rng.uniform(-1.0, 1.0, size=5) * cfg.jitter
            img = render_chip(
                s,
                length=p["length"] * (1 + 0.08 * jit[0]),
                width=p["width"] * (1 + 0.08 * jit[1]),
                angle=p["angle"] + np.deg2rad(8.0) * jit[2],
                brightness=p["brightness"],
                cx=2.0 * unit * jit[3],
                cy=2.0 * unit * jit[4],
            )
            if cfg.speckle_sigma > 0:
                shape = 1.0 / cfg.speckle_sigma ** 2
                img = img * rng.gamma(shape, 1.0 / shape, size=img.shape)
            images[n, :, :, 0] = np.clip(img, 0.0, 1.0)
            labels[n] = k
            sources.append(f"synth:class{k}:mode{j}:{i}")
            n += 1
    return Dataset(images, labels, sources, [f"class_{k}" for k in range(cfg.num_classes)])


def resize_bilinear(img, target: int) -> np.ndarray:
    """Bilinear resize to ``target x target`` (half-pixel centres, edge clamp)."""
    a = np.asarray(img, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    h, w = a.shape[:2]
    if h == target and w == target:
        out = a.copy()
        return out[:, :, 0] if squeeze else out

    def axis_weights(n_in: int):
        src = np.clip((np.arange(target) + 0.5) * n_in / target - 0.5, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis_weights(h)
    c0, c1, fc = axis_weights(w)
    rows = a[r0] * (1 - fr)[:, None, None] + a[r1] * fr[:, None, None]
    out = rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    # a convex combination of one value must reproduce it exactly
    out = np.clip(out, a.min(), a.max())
    return out[:, :, 0] if squeeze else out


def _read_gray(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                raise DatasetError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            return np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"{path}: unreadable image ({exc})") from exc


def load_dir(root, image_size: int) -> Dataset:
    """One subdirectory per class; labels follow sorted subdirectory names."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class subdirectories")
    images, labels, sources = [], [], []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"{d}: empty class directory")
        for f in files:
            images.append(resize_bilinear(_read_gray(f)[:, :, None], image_size))
            labels.append(label)
            sources.append(str(f))
    return Dataset(np.stack(images), np.asarray(labels), sources, [d.name for d in class_dirs])


def export_dir(ds: Dataset, root) -> None:
    """Write ``ds`` as 8-bit grayscale PNGs in the directory layout ``load_dir`` reads."""
    from PIL import Image

    root = Path(root)
    counters: dict = {}
    for img, label in zip(ds.images, ds.labels):
        name = ds.class_names[label]
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        n = counters.get(name, 0)
        counters[name] = n + 1
        pixels = np.round(np.clip(img[:, :, 0], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(d / f"{n:05d}.png")


def augment_resample(ds: Dataset, per_class_target: int, seed: int, shuffle: bool = False) -> Dataset:
    """Resample every class to exactly ``per_class_target`` samples.

    When the target is at least the class size, all originals are kept and the
    shortfall is drawn with replacement; otherwise a random subset is taken.
    """
    rng = np.random.default_rng(seed)
    picked = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        if idx.size == 0:
            raise DatasetError(f"class {ds.class_names[k]!r} is empty")
        if per_class_target >= idx.size:
            extra = rng.choice(idx, size=per_class_target - idx.size, replace=True)
            picked.append(np.concatenate([idx, extra]))
        else:
            picked.append(np.sort(rng.choice(idx, size=per_class_target, replace=False)))
    order = np.concatenate(picked)
    if shuffle:
        order = rng.permutation(order)
    return ds.subset(order)


def split_per_class(ds: Dataset, train_per_class: int, seed: int):
    """Random ``train_per_class`` samples of each class for training, the rest for testing."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == k))
        if idx.size <= train_per_class:
            raise DatasetError(
                f"class {ds.class_names[k]!r} has {idx.size} samples, need more than {train_per_class}"
            )
        train.append(np.sort(idx[:train_per_class]))
        test.append(np.sort(idx[train_per_class:]))
    return ds.subset(np.concatenate(train)), ds.subset(np.concatenate(test))
