"""Datasets: CIFAR binary records, a synthetic shape dataset, normalisation, batching."""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

CIFAR_VARIANTS = {"cifar10": (1, 10), "cifar100": (2, 100)}
CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x 3, uint8
    labels: np.ndarray  # N, int64
    num_classes: int
    split: str = "train"
    channel_mean: tuple = (0.0, 0.0, 0.0)
    channel_std: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be N x H x W x 3, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_size(self):
        return self.images.shape[1:3]

    def with_stats(self, mean, std):
        return replace(self, channel_mean=tuple(mean), channel_std=tuple(std))


def channel_stats(images):
    """Per-channel mean and std of pixel values scaled to [0, 1]."""
    if len(images) == 0:
        return (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
    x = images.reshape(-1, 3).astype(np.float64) / 255.0
    return tuple(float(v) for v in x.mean(axis=0)), tuple(float(v) for v in x.std(axis=0))


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------


def load_cifar_binary(path, variant="cifar10", split="train", stats=None) -> Dataset:
    """Read a CIFAR binary batch file.

    Records are label byte(s) followed by 3072 pixel bytes, plane-major R, G, B.
    CIFAR-100 records carry a coarse and a fine label; the fine one is used.
    Channel statistics are computed from the file unless ``stats`` is given.
    """
    if variant not in CIFAR_VARIANTS:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    label_bytes, num_classes = CIFAR_VARIANTS[variant]
    rec = label_bytes + CIFAR_PIXELS
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % rec:
        raise DatasetFormatError(f"{path}: size {len(raw)} is not a multiple of the {rec}-byte record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DatasetFormatError(f"{path}: label {labels.max()} out of range for {variant}")
    images = arr[:, label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    mean, std = stats if stats is not None else channel_stats(images)
    return Dataset(np.ascontiguousarray(images), labels, num_classes, split, tuple(mean), tuple(std))


def write_cifar_binary(path, dataset: Dataset, variant="cifar10"):
    """Write ``dataset`` in CIFAR binary layout (coarse labels written as 0)."""
    label_bytes, num_classes = CIFAR_VARIANTS[variant]
    if dataset.image_size != (CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError(f"CIFAR records hold 32x32 images, got {dataset.image_size}")
    if dataset.num_classes > num_classes:
        raise ValueError(f"{variant} holds at most {num_classes} classes")
    n = len(dataset)
    out = np.zeros((n, label_bytes + CIFAR_PIXELS), dtype=np.uint8)
    out[:, label_bytes - 1] = dataset.labels
    out[:, label_bytes:] = dataset.images.transpose(0, 3, 1, 2).reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(out.tobytes())


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

SHAPES = ("disk", "ring", "square", "frame", "triangle", "plus", "hbar", "vbar")
_SPLIT_TAGS = {"train": 0, "test": 1}


def _shape_mask(shape, dy, dx, r):
    ax, ay = np.abs(dx), np.abs(dy)
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        return np.maximum(ax, ay) <= 0.8 * r
    if shape == "frame":
        m = np.maximum(ax, ay)
        return (m <= 0.85 * r) & (m >= 0.45 * r)
    if shape == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (ax <= 0.6 * (dy + r))
    if shape == "hbar":
        return (ax <= r) & (ay <= 0.35 * r)
    if shape == "vbar":
        return (ay <= r) & (ax <= 0.35 * r)
    arm = 0.3 * r
    return ((ax <= arm) & (ay <= r)) | ((ay <= arm) & (ax <= r))


def render_sample(label, num_classes, size, rng, noise=24.0):
    """One synthetic image: a class-keyed shape in a random hue on a noisy background.

    Classes differ only in shape, never in colour, so colour and contrast
    changes from augmentation keep the label. Beyond eight classes the
    shape size range is split between class groups.
    """
    shape = SHAPES[label % len(SHAPES)]
    group, n_groups = label // len(SHAPES), -(-num_classes // len(SHAPES))
    rgb = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.55, 0.95), rng.uniform(0.6, 1.0))) * 255
    background = rng.uniform(20, 110) + rng.uniform(-15, 15, size=3)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    lo = 0.18 + 0.14 * group / n_groups
    r = rng.uniform(lo, lo + 0.14 / n_groups) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = _shape_mask(shape, yy - cy, xx - cx, r)
    img = np.empty((size, size, 3))
    img[:] = background
    img[mask] = rgb
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthetic_dataset(seed, num_classes=8, per_class=100, size=32, split="train", stats=None,
                      noise=24.0) -> Dataset:
    """Balanced dataset of ``num_classes * per_class`` rendered shapes, deterministic in seed."""
    if num_classes < 2:
        raise ValueError("synthetic dataset needs at least 2 classes")
    tag = _SPLIT_TAGS[split]
    images, labels = [], []
    for c in range(num_classes):
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, tag, c, i]))
            images.append(render_sample(c, num_classes, size, rng, noise))
            labels.append(c)
    images = np.stack(images) if images else np.zeros((0, size, size, 3), np.uint8)
    mean, std = stats if stats is not None else channel_stats(images)
    return Dataset(images, np.array(labels), num_classes, split, tuple(mean), tuple(std))


def synthetic_splits(seed, num_classes=8, per_class_train=100, per_class_test=100, size=32, noise=24.0):
    train = synthetic_dataset(seed, num_classes, per_class_train, size, "train", noise=noise)
    test = synthetic_dataset(seed, num_classes, per_class_test, size, "test",
                             stats=(train.channel_mean, train.channel_std), noise=noise)
    return train, test


# ---------------------------------------------------------------------------
# normalisation and batching
# ---------------------------------------------------------------------------


def _check_std(std):
    if any(s <= 0 for s in std):
        raise ValueError(f"std components must be positive, got {tuple(std)}")


def normalize(img, mean, std):
    """HxWx3 uint8 -> 3xHxW float32, per channel (v/255 - mean) / std."""
    return normalize_batch(img[None], mean, std)[0]


def normalize_batch(images, mean, std):
    _check_std(std)
    x = images.astype(np.float64) / 255.0
    x = (x - np.asarray(mean, dtype=np.float64)) / np.asarray(std, dtype=np.float64)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float32)


def denormalize(x, mean, std):
    """Inverse of :func:`normalize` up to byte quantisation."""
    v = (x.transpose(1, 2, 0).astype(np.float64) * np.asarray(std) + np.asarray(mean)) * 255.0
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


_PLAN_TAG = 7


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    epoch: int
    batch_size: int
    n: int

    @property
    def permutation(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, _PLAN_TAG, self.epoch]))
        return rng.permutation(self.n)


def batches(dataset: Dataset, plan: BatchPlan):
    """Yield ``(indices, images, labels)`` in plan order; the last partial batch is kept.

    A trailing batch of a single sample is dropped, since train-mode
    batch normalisation needs at least two samples.
    """
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    if plan.batch_size > len(dataset) or plan.batch_size < 1:
        raise ValueError(f"batch size {plan.batch_size} invalid for {len(dataset)} samples")
    if plan.n != len(dataset):
        raise ValueError(f"plan covers {plan.n} samples, dataset has {len(dataset)}")
    perm = plan.permutation
    for start in range(0, len(perm), plan.batch_size):
        idx = perm[start:start + plan.batch_size]
        if len(idx) == 1 and start > 0 and plan.batch_size > 1:
            log.warning("dropping trailing singleton batch (sample %d)", int(idx[0]))
            continue
        yield idx, dataset.images[idx], dataset.labels[idx]
