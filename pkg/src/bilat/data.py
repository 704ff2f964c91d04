"""Datasets: CIFAR-10 binary records, synthetic blobs, and the desk digits set.

Images are always float64 in [-1, 1] (byte b maps to (b - 127.5)/127.5) and
labels are int64 class indices. Loaders are deterministic: file order for
on-disk data, seeded generators for synthetic data.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .rng import derived_rng

__all__ = [
    "Dataset", "DatasetSplits", "rescale_pixels", "pixels_to_bytes",
    "load_cifar10_binary", "to_cifar10_bytes", "synth_blobs", "load_desk_digits",
    "split_dataset", "take_per_class",
]

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (N, ...) in [-1, 1]
    y: np.ndarray  # (N,) int64
    n_classes: int
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if x.shape[0] != y.shape[0]:
            raise ValueError("x and y disagree on the number of examples")
        if x.size and (x.min() < -1.0 or x.max() > 1.0):
            raise ValueError("images must lie in [-1, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x.shape[1:]


@dataclass(frozen=True)
class DatasetSplits:
    train: Dataset
    test: Dataset

    def __post_init__(self):
        if self.train.n_classes != self.test.n_classes:
            raise ValueError("train/test class counts differ")
        if self.train.input_shape != self.test.input_shape:
            raise ValueError("train/test input shapes differ")


def rescale_pixels(b) -> np.ndarray:
    """0-255 byte values -> reals in [-1, 1] via (b - 127.5)/127.5."""
    b = np.asarray(b)
    if b.size and (b.min() < 0 or b.max() > 255):
        raise ValueError("pixel bytes must lie in [0, 255]")
    return (b.astype(np.float64) - 127.5) / 127.5


def pixels_to_bytes(x) -> np.ndarray:
    """Inverse of rescale_pixels; rounds to the nearest byte."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < -1.0 or x.max() > 1.0):
        raise ValueError("scaled pixels must lie in [-1, 1]")
    return np.clip(np.rint(x * 127.5 + 127.5), 0, 255).astype(np.uint8)


def take_per_class(x: np.ndarray, y: np.ndarray, cap: int) -> np.ndarray:
    """Indices of at most cap examples per class, preserving order."""
    if cap < 0:
        raise ValueError("per-class cap must be >= 0")
    seen: dict[int, int] = {}
    keep = []
    for i, label in enumerate(y):
        c = int(label)
        if seen.get(c, 0) < cap:
            seen[c] = seen.get(c, 0) + 1
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def load_cifar10_binary(path: str, take: int | None = None) -> Dataset:
    """Parse CIFAR-10 binary records: 1 label byte + 3072 channel-planar pixels."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        raise ValueError(
            f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    y = records[:, 0].astype(np.int64)
    if y.max() >= 10:
        raise ValueError(f"{path}: label byte {y.max()} out of range for 10 classes")
    x = rescale_pixels(records[:, 1:]).reshape(-1, 3, 32, 32)
    if take is not None:
        keep = take_per_class(x, y, take)
        x, y = x[keep], y[keep]
    return Dataset(x, y, 10, name=f"cifar10:{os.path.basename(path)}")


def to_cifar10_bytes(ds: Dataset) -> bytes:
    """Re-serialize to the binary record layout; byte-exact for loaded data."""
    if ds.input_shape != (3, 32, 32) or ds.n_classes != 10:
        raise ValueError("dataset is not CIFAR-10 shaped")
    pixels = pixels_to_bytes(ds.x).reshape(len(ds), 3072)
    records = np.concatenate([ds.y.astype(np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


def synth_blobs(n_classes: int, per_class: int, shape, margin: float, seed,
                sigma: float | None = None) -> Dataset:
    """Gaussian clusters with pairwise center distance >= margin, clipped to the box.

    sigma defaults to margin/8, putting a 6-sigma gap well inside the margin so
    the classes stay linearly separable.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    dim = int(np.prod(shape))
    sigma = margin / 8.0 if sigma is None else float(sigma)
    rng = derived_rng((int(seed),))
    centers: list[np.ndarray] = []
    for _ in range(n_classes):
        for _ in range(2000):
            cand = rng.uniform(-0.7, 0.7, dim)
            if all(np.linalg.norm(cand - c) >= margin for c in centers):
                centers.append(cand)
                break
        else:
            raise ValueError(
                f"could not pack {n_classes} centers with margin {margin} in "
                f"{dim} dimensions")
    xs, ys = [], []
    for c, center in enumerate(centers):
        xs.append(center + sigma * rng.standard_normal((per_class, dim)))
        ys.append(np.full(per_class, c, dtype=np.int64))
    x = np.clip(np.concatenate(xs), -1.0, 1.0).reshape(-1, *shape)
    return Dataset(x, np.concatenate(ys), n_classes,
                   name=f"blobs:{n_classes}x{per_class}")


def load_desk_digits(per_class: int | None = None, noise_sigma: float = 0.0,
                     seed: int = 0, n_classes: int = 10,
                     contrast: float = 1.0) -> Dataset:
    """8x8 digit images bundled with scikit-learn, rescaled to [-1, 1].

    noise_sigma adds seeded gaussian pixel noise (then clips), which makes the
    desk-scale problem hard enough for adversarial-training effects to show.
    contrast < 1 shrinks the dynamic range around 0 so that perturbation
    budgets quoted in 0-255 pixel units are meaningful on these images (a full
    digit intensity level is 16x one 0-255 level at contrast 1).
    """
    from sklearn.datasets import load_digits

    if not 0.0 < contrast <= 1.0:
        raise ValueError("contrast must be in (0, 1]")
    raw = load_digits()
    x = contrast * (raw.images.astype(np.float64) - 8.0) / 8.0  # pixel range 0..16
    y = raw.target.astype(np.int64)
    if n_classes < 10:
        keep = y < n_classes
        x, y = x[keep], y[keep]
    x = x[:, None, :, :]  # (N, 1, 8, 8)
    if per_class is not None:
        keep = take_per_class(x, y, per_class)
        x, y = x[keep], y[keep]
    if noise_sigma > 0:
        rng = derived_rng((int(seed), 0x6e6f6973))
        x = np.clip(x + noise_sigma * rng.standard_normal(x.shape), -1.0, 1.0)
    return Dataset(np.clip(x, -1.0, 1.0), y, n_classes,
                   name=f"digits:{n_classes}")


def split_dataset(ds: Dataset, test_fraction: float, seed) -> DatasetSplits:
    """Seeded shuffle, then a class-stratified train/test split."""
    if not (0.0 < test_fraction < 1.0):
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = derived_rng((int(seed), 0x73706c69))
    order = rng.permutation(len(ds))
    test_idx, train_idx = [], []
    counts = {c: 0 for c in range(ds.n_classes)}
    want = {c: int(round((ds.y == c).sum() * test_fraction)) for c in range(ds.n_classes)}
    for i in order:
        c = int(ds.y[i])
        if counts[c] < want[c]:
            counts[c] += 1
            test_idx.append(i)
        else:
            train_idx.append(i)
    train_idx = np.sort(np.asarray(train_idx, dtype=np.int64))
    test_idx = np.sort(np.asarray(test_idx, dtype=np.int64))
    mk = lambda idx, tag: Dataset(ds.x[idx], ds.y[idx], ds.n_classes,
                                  name=f"{ds.name}/{tag}")
    return DatasetSplits(mk(train_idx, "train"), mk(test_idx, "test"))
