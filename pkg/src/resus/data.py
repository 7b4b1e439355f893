"""Synthetic pattern-classification images and their binary file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"RSDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIQ")  # magic, version, n, c, h, w, classes, seed


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    image_shape: tuple[int, int, int] = (1, 16, 16)
    n_train: int = 1024
    n_test: int = 512
    sigma: float = 0.5
    seed: int = 0
    # max circular shift in pixels applied per sample; 0 keeps templates fixed
    jitter: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("splits must be non-empty")


@dataclass
class Dataset:
    images: np.ndarray  # float32 (n, c, h, w)
    labels: np.ndarray  # int64 (n,)
    num_classes: int
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.seed)


def _pattern_bank(h: int, w: int) -> list[np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    r = np.hypot(yy - cy, xx - cx)
    period = max(h, w) / 4
    bank = [
        np.sin(2 * np.pi * yy / period),                      # horizontal bars
        np.sin(2 * np.pi * xx / period),                      # vertical bars
        np.sin(2 * np.pi * (xx + yy) / (period * 1.41)),      # diagonal bars
        np.sin(2 * np.pi * (xx - yy) / (period * 1.41)),      # anti-diagonal bars
        np.where(((yy // 2) + (xx // 2)) % 2 == 0, 1.0, -1.0),  # checker
        np.exp(-(r ** 2) / (2 * (min(h, w) / 6) ** 2)),       # centred blob
        np.exp(-((r - min(h, w) / 3) ** 2) / 2.0),            # ring
        ((np.abs(yy - cy) < 1.5) | (np.abs(xx - cx) < 1.5)).astype(float),  # cross
        np.exp(-(np.minimum(np.hypot(yy, xx), np.hypot(yy - h + 1, xx - w + 1)) ** 2) / (h / 2)),  # corner blobs
        ((np.minimum.reduce([yy, xx, h - 1 - yy, w - 1 - xx])) < 2).astype(float),  # frame
    ]
    out = []
    for b in bank:
        b = b - b.mean()
        out.append(b / b.std())
    return out


def class_templates(num_classes: int, image_shape) -> np.ndarray:
    """One zero-mean, unit-variance template per class, shape (k, c, h, w)."""
    c, h, w = image_shape
    bank = _pattern_bank(h, w)
    if num_classes > len(bank):
        raise ValueError(f"only {len(bank)} templates available, {num_classes} classes requested")
    templates = np.empty((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            # channel gains differ per class so colour carries some signal too
            gain = 1.0 if c == 1 else 0.6 + 0.4 * np.cos(np.pi * (k + 1) * (ch + 1) / (c + 1))
            templates[k, ch] = gain * bank[k]
    return templates


def _make_split(templates, n, sigma, jitter, rng) -> tuple[np.ndarray, np.ndarray]:
    k = len(templates)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    images = templates[labels].copy()
    if jitter:
        shifts = rng.integers(-jitter, jitter + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(shifts):
            images[i] = np.roll(images[i], (dy, dx), axis=(1, 2))
    images += sigma * rng.standard_normal(images.shape)
    return images.astype(np.float32), labels.astype(np.int64)


def generate_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) splits of noisy class templates."""
    templates = class_templates(spec.num_classes, spec.image_shape)
    train_rng, test_rng = (np.random.default_rng(s) for s in
                           np.random.SeedSequence(spec.seed).spawn(2))
    xtr, ytr = _make_split(templates, spec.n_train, spec.sigma, spec.jitter, train_rng)
    xte, yte = _make_split(templates, spec.n_test, spec.sigma, spec.jitter, test_rng)
    return (Dataset(xtr, ytr, spec.num_classes, spec.seed),
            Dataset(xte, yte, spec.num_classes, spec.seed))


def nearest_template_predict(images: np.ndarray, num_classes: int) -> np.ndarray:
    templates = class_templates(num_classes, images.shape[1:]).reshape(num_classes, -1)
    flat = images.reshape(len(images), -1).astype(np.float64)
    d = ((flat[:, None, :] - templates[None]) ** 2).sum(-1)
    return d.argmin(axis=1)


def save_dataset(path, ds: Dataset) -> None:
    n, c, h, w = ds.images.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w, ds.num_classes, ds.seed)
    path = Path(path)
    with path.open("wb") as f:
        f.write(header)
        f.write(ds.images.astype("<f4").tobytes())
        f.write(ds.labels.astype("<i4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    magic, version, n, c, h, w, k, seed = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = _HEADER.size
    count = n * c * h * w
    images = np.frombuffer(raw, "<f4", count, off).reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(raw, "<i4", n, off + 4 * count).astype(np.int64)
    return Dataset(images, labels, k, seed)
