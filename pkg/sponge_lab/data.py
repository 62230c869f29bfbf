"""
Dataset ingestion: CIFAR-10 binary batches, IDX files and synthetic fixtures.

Every loader has a matching writer, and writing a loaded dataset reproduces
the original bytes.
"""

import logging
import struct
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .autodiff import Array
from .errors import DatasetFormatError

logger = logging.getLogger(__name__)

CIFAR_CLASSES = 10
CIFAR_SHAPE = (3, 32, 32)
CIFAR_RECORD = 1 + 3 * 32 * 32

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Split(StrEnum):
    TRAIN = "train"
    VAL = "val"


@dataclass(frozen=True)
class Dataset:
    """Images in [0, 1] as N×C×H×W float64 with one class index per image."""

    images: Array
    labels: NDArray[np.int64]
    split: Split = Split.TRAIN
    num_classes: int = CIFAR_CLASSES

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be N×C×H×W, got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetFormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetFormatError("pixel values must lie in [0, 1]")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise DatasetFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, int, int]:
        _, c, h, w = self.images.shape
        return (c, h, w)

    def subset(self, indices: NDArray[np.int64], split: Split | None = None) -> "Dataset":
        return Dataset(
            self.images[indices],
            self.labels[indices],
            split if split is not None else self.split,
            self.num_classes,
        )


def _read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DatasetFormatError(f"cannot read {path}: {e}") from e


def _write_bytes(path: str | Path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise DatasetFormatError(f"cannot write {path}: {e}") from e


def _to_pixels(images: Array) -> NDArray[np.uint8]:
    return np.rint(images * 255.0).astype(np.uint8)


def load_cifar10(path: str | Path, split: Split = Split.TRAIN) -> Dataset:
    """
    Read a CIFAR-10 binary batch: records of one label byte and 3072
    channel-major pixel bytes.

    Raises:
        DatasetFormatError: if the file is truncated or a label is ≥ 10
    """
    raw = _read_bytes(path)
    if not raw or len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        raise DatasetFormatError(f"{path}: label {labels.max()} out of range [0, 10)")
    images = records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0
    logger.info("Loaded %d CIFAR-10 records from %s", labels.size, path)
    return Dataset(images, labels, split, CIFAR_CLASSES)


def write_cifar10(dataset: Dataset, path: str | Path) -> Path:
    """Write a 3×32×32 dataset in the CIFAR-10 binary layout."""
    if dataset.input_shape != CIFAR_SHAPE:
        raise DatasetFormatError(f"CIFAR-10 records are 3×32×32, got {dataset.input_shape}")
    records = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = dataset.labels.astype(np.uint8)
    records[:, 1:] = _to_pixels(dataset.images).reshape(len(dataset), -1)
    path = Path(path)
    _write_bytes(path, records.tobytes())
    return path


def _parse_idx(raw: bytes, magic: int, path: str | Path) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    body = raw[header_len:]
    if len(body) != int(np.prod(dims)):
        raise DatasetFormatError(
            f"{path}: expected {int(np.prod(dims))} data bytes, found {len(body)}"
        )
    return dims, body


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    split: Split = Split.TRAIN,
    num_classes: int = 10,
) -> Dataset:
    """
    Read an IDX image/label pair (unsigned-byte images N×H×W, labels N).

    Raises:
        DatasetFormatError: on bad magic or mismatched sample counts
    """
    dims, body = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    (label_count,), label_body = _parse_idx(
        _read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path
    )
    n, h, w = dims
    if n != label_count:
        raise DatasetFormatError(
            f"{images_path} has {n} images but {labels_path} has {label_count} labels"
        )
    images = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    labels = np.frombuffer(label_body, dtype=np.uint8).astype(np.int64)
    logger.info("Loaded %d IDX images (%d×%d) from %s", n, h, w, images_path)
    return Dataset(images, labels, split, num_classes)


def write_idx(dataset: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write a single-channel dataset as an IDX image/label pair."""
    c, h, w = dataset.input_shape
    if c != 1:
        raise DatasetFormatError(f"IDX images are single-channel, got {c} channels")
    n = len(dataset)
    _write_bytes(
        images_path,
        struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + _to_pixels(dataset.images).tobytes(),
    )
    _write_bytes(
        labels_path,
        struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes(),
    )


def synth_dataset(
    num_samples: int,
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (1, 8, 8),
    seed: int = 0,
    split: Split = Split.TRAIN,
    noise: float = 0.1,
) -> Dataset:
    """
    Gaussian class blobs in pixel space.

    Each class has a random prototype image; samples add Gaussian noise and
    are clipped to [0, 1]. Labels cycle through the classes before shuffling,
    so class counts differ by at most one.
    """
    if num_classes < 2:
        raise ValueError(f"need at least two classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    prototypes = rng.uniform(0.0, 1.0, size=(num_classes, *input_shape))
    labels = rng.permutation(np.arange(num_samples) % num_classes).astype(np.int64)
    images = prototypes[labels] + rng.normal(0.0, noise, size=(num_samples, *input_shape))
    return Dataset(np.clip(images, 0.0, 1.0), labels, split, num_classes)


def split_dataset(dataset: Dataset, val_size: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint random train/val split."""
    if not 0 < val_size < len(dataset):
        raise ValueError(f"val_size must lie in (0, {len(dataset)}), got {val_size}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return (
        dataset.subset(order[val_size:], Split.TRAIN),
        dataset.subset(order[:val_size], Split.VAL),
    )


def downsample(dataset: Dataset, size: int) -> Dataset:
    """
    Center-crop to the largest multiple of ``size`` and block-average down to
    size×size (28×28 → crop 24×24 → 8×8).
    """
    _, c, h, w = dataset.images.shape
    if size < 1 or size > min(h, w):
        raise ValueError(f"cannot downsample {h}×{w} images to {size}×{size}")
    fh, fw = h // size, w // size
    top, left = (h - fh * size) // 2, (w - fw * size) // 2
    cropped = dataset.images[:, :, top : top + fh * size, left : left + fw * size]
    pooled = cropped.reshape(len(dataset), c, size, fh, size, fw).mean(axis=(3, 5))
    return Dataset(pooled, dataset.labels, dataset.split, dataset.num_classes)
