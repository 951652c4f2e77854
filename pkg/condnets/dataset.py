"""
Datasets: CIFAR-10 batch loading and seeded synthetic generators.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from condnets.errors import ArgumentError, DataError, FormatError

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "CONDNETS_DATA_DIR"

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10


@dataclass
class Dataset:
    """
    A labeled set of inputs.

    Attributes:
        images (np.ndarray): N × C × H × W images with pixels in [0, 1], or N × m feature vectors.
        labels (np.ndarray): integer class ids in [0, num_classes).
        num_classes (int): class count K.
        provenance (str): where the data came from, e.g. ``"cifar10:data_batch_1.bin"``.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise DataError("a dataset needs at least one sample")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} samples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.images.ndim == 4 and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("image pixels must be normalized to [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, self.provenance)

    def astype(self, dtype: str) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.num_classes, self.provenance)


def default_data_dir() -> Optional[Path]:
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


def cifar_files(path: Union[str, Path]) -> List[Path]:
    """A single batch file, or every ``*.bin`` batch of a directory in name order."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix == ".bin")
        if not files:
            raise DataError(f"no CIFAR-10 .bin batches in {path}")
        return files
    if not path.exists():
        raise DataError(f"{path} does not exist")
    return [path]


def load_cifar10(path: Union[str, Path], limit: Optional[int] = None) -> Dataset:
    """
    Read CIFAR-10 binary batches: 3073-byte records of one label byte followed by
    3072 channel-planar RGB pixel bytes. Pixels are scaled by 1/255.

    Parameters:
        path (str | Path): a batch file or a directory of ``*.bin`` batches.
        limit (int, optional): read only the first ``limit`` records.

    Raises:
        FormatError: a file is not a whole number of records or holds a label above 9.
    """
    if limit is not None and limit < 1:
        raise ArgumentError(f"limit must be positive, got {limit}")
    labels, pixels, names = [], [], []
    remaining = limit
    for file in cifar_files(path):
        raw = np.fromfile(file, dtype=np.uint8)
        whole = len(raw) // CIFAR_RECORD_BYTES
        if len(raw) % CIFAR_RECORD_BYTES:
            raise FormatError(f"{file} ends with a truncated record", offset=whole * CIFAR_RECORD_BYTES)
        records = raw.reshape(whole, CIFAR_RECORD_BYTES)
        if remaining is not None:
            records = records[:remaining]
            remaining -= len(records)
        bad = np.flatnonzero(records[:, 0] >= CIFAR_CLASSES)
        if bad.size:
            raise FormatError(f"{file} has label {records[bad[0], 0]}", offset=int(bad[0]) * CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        pixels.append(records[:, 1:])
        names.append(file.name)
        if remaining == 0:
            break
    images = np.concatenate(pixels).reshape((-1,) + CIFAR_SHAPE).astype(np.float32) / np.float32(255.0)
    logger.info("loaded %d CIFAR-10 images from %s", len(images), ", ".join(names))
    return Dataset(images, np.concatenate(labels), CIFAR_CLASSES, provenance="cifar10:" + ",".join(names))


SYNTHETIC_KINDS = ("two_clusters", "block_classes", "routed_clusters")


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def _two_clusters(n: int, rng: np.random.Generator, margin: float = 0.5) -> Dataset:
    labels = _balanced_labels(n, 2, rng)
    points = rng.normal(0.0, 1.0, size=(n, 2))
    sign = np.where(labels == 1, 1.0, -1.0)
    points[:, 0] = sign * (np.abs(points[:, 0]) + 1.5 + margin)
    return Dataset(points, labels, 2, provenance="synthetic:two_clusters")


def _routed_clusters(n: int, rng: np.random.Generator, margin: float = 0.1) -> Dataset:
    points = rng.normal(0.0, 1.0, size=(n, 2))
    points = np.sign(points) * (np.abs(points) + margin)
    points[points == 0] = margin
    labels = (points[:, 0] * points[:, 1] < 0).astype(np.int64)
    return Dataset(points, labels, 2, provenance="synthetic:routed_clusters")


def _block_classes(
    n: int,
    rng: np.random.Generator,
    groups: int = 2,
    classes: int = 4,
    channels: int = 4,
    size: int = 8,
    noise: float = 0.1,
) -> Dataset:
    if channels % groups:
        raise ArgumentError(f"{channels} channels cannot be split into {groups} groups")
    labels = _balanced_labels(n, classes, rng)
    images = rng.uniform(0.0, noise, size=(n, channels, size, size))
    block = channels // groups
    half = size // 2
    for i, label in enumerate(labels):
        group = label % groups
        quadrant = (label // groups) % 4
        ys = slice((quadrant // 2) * half, (quadrant // 2 + 1) * half)
        xs = slice((quadrant % 2) * half, (quadrant % 2 + 1) * half)
        images[i, group * block : (group + 1) * block, ys, xs] += 1.0 - 2 * noise
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes, provenance=f"synthetic:block_classes:{groups}")


def gen_synthetic(kind: str, n: int, seed: int = 0, **options) -> Dataset:
    """
    Deterministic labeled synthetic data.

    ``two_clusters``: two 2-d Gaussian clusters, separable by ``x0 = 0``.
    ``block_classes``: images where the class id modulo ``groups`` picks the informative
    channel block and the class id divided by ``groups`` picks the lit quadrant.
    ``routed_clusters``: 2-d points labeled by whether ``x0·x1 < 0``; each half-plane
    ``x0 > 0`` / ``x0 < 0`` is linearly separable on its own.
    """
    if n < 2:
        raise ArgumentError(f"synthetic datasets need n ≥ 2, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "two_clusters":
        return _two_clusters(n, rng, **options)
    if kind == "block_classes":
        return _block_classes(n, rng, **options)
    if kind == "routed_clusters":
        return _routed_clusters(n, rng, **options)
    raise ArgumentError(f"unknown synthetic dataset {kind!r}; expected one of {SYNTHETIC_KINDS}")
