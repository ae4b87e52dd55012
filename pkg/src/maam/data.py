"""CIFAR-10 binary ingestion, augmentation and deterministic batching."""

from __future__ import annotations

import os
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import DataError
from .tensor import DTYPE, Rng, make_rng

IMAGE_SIZE = 32
CHANNELS = 3
NUM_CLASSES = 10
RECORD_BYTES = 1 + CHANNELS * IMAGE_SIZE * IMAGE_SIZE
RECORDS_PER_FILE = 10_000
FILE_BYTES = RECORD_BYTES * RECORDS_PER_FILE
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
PAD = 4

DATA_DIR_ENV = "MAAM_DATA_DIR"

# rng stream ids, kept distinct from model initialisation (stream 0)
_SHUFFLE_STREAM = 1
_AUGMENT_STREAM = 2
_SUBSET_STREAM = 3
_SYNTHETIC_STREAM = 4


@dataclass
class Dataset:
    """Images as an (M, 32, 32, 3) uint8 NHWC array plus int64 labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)


@dataclass
class Batch:
    """Float32 NCHW images in [0, 1] and their labels."""

    x: np.ndarray
    y: np.ndarray

    def checksum(self) -> int:
        return zlib.crc32(self.y.astype("<i8").tobytes(), zlib.crc32(self.x.astype("<f4").tobytes()))


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------


def _parse_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 file {path}")
    size = path.stat().st_size
    if size != FILE_BYTES:
        raise DataError(f"{path}: expected {FILE_BYTES} bytes, found {size}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(RECORDS_PER_FILE, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    # planes are R, G, B, each 32x32 row-major
    images = raw[:, 1:].reshape(-1, CHANNELS, IMAGE_SIZE, IMAGE_SIZE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def load_cifar10(directory, split: str = "train") -> Dataset:
    """Parse the binary distribution; ``split`` is ``"train"`` or ``"test"``."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    directory = Path(directory)
    parts = [_parse_file(directory / name) for name in (TRAIN_FILES if split == "train" else TEST_FILES)]
    return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def write_cifar10_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write NHWC uint8 images in the CIFAR-10 binary record layout."""
    images = np.asarray(images, dtype=np.uint8)
    records = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.transpose(0, 3, 1, 2).reshape(len(labels), -1)
    records.tofile(path)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _patterns(labels: np.ndarray, rng: Rng) -> np.ndarray:
    """Binary texture masks, one per label, at a random phase/position."""
    n = len(labels)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    yy, xx = yy[None], xx[None]
    phase = rng.uniform(0, 1, size=(n, 1, 1))
    cy, cx = rng.uniform(8, 24, size=(2, n, 1, 1))
    out = np.zeros((n, IMAGE_SIZE, IMAGE_SIZE), dtype=bool)

    def stripes(coord, period):
        return np.sin(2 * np.pi * (coord / period + phase)) > 0

    masks = {
        0: lambda: stripes(yy, 4.0),
        1: lambda: stripes(xx, 4.0),
        2: lambda: stripes(xx + yy, 6.0),
        3: lambda: stripes(xx - yy, 6.0),
        4: lambda: stripes(xx, 8.0) ^ stripes(yy, 8.0),
        5: lambda: stripes(yy, 10.0),
        6: lambda: stripes(xx, 10.0),
        7: lambda: (np.sin(2 * np.pi * (xx / 6 + phase)) > 0.5) & (np.sin(2 * np.pi * (yy / 6 + phase)) > 0.5),
        8: lambda: stripes(np.hypot(yy - cy, xx - cx), 6.0),
        9: lambda: (np.abs(yy - cy) < 6) & (np.abs(xx - cx) < 6),
    }
    for c, make in masks.items():
        sel = labels == c
        if sel.any():
            full = np.broadcast_to(make(), (n, IMAGE_SIZE, IMAGE_SIZE))
            out[sel] = full[sel]
    return out


def synthetic_dataset(n: int, seed: int = 0, split: str = "train", noise: float = 0.12) -> Dataset:
    """Deterministic 10-class toy set of coloured textures.

    Each class is a texture (stripes of several orientations and periods,
    checkerboard, dot grid, rings, a square) drawn at a random phase or
    position with random foreground/background colours plus Gaussian noise,
    so colour carries no class information. Labels are balanced.
    """
    rng = make_rng(seed, _SYNTHETIC_STREAM, 0 if split == "train" else 1)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES).astype(np.int64)
    mask = _patterns(labels, rng)[..., None]
    fg = rng.uniform(0, 1, size=(n, 1, 1, CHANNELS))
    bg = rng.uniform(0, 1, size=(n, 1, 1, CHANNELS))
    weak = np.abs(fg - bg).mean(axis=-1, keepdims=True) < 0.3
    bg = np.where(weak, 1.0 - fg, bg)
    img = np.where(mask, fg, bg) + rng.normal(0, noise, size=(n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS))
    return Dataset(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), labels)


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------


def augment(img: np.ndarray, rng: Rng, offsets: Optional[tuple[int, int]] = None, flip: Optional[bool] = None) -> np.ndarray:
    """Zero-pad by 4, crop 32x32 at a uniform offset in [0, 8]^2, mirror with p=0.5.

    ``offsets`` and ``flip`` force the respective choice; the rng draws are
    made either way so the stream position does not depend on them.
    """
    drawn = rng.integers(0, 2 * PAD + 1, size=2)
    drawn_flip = rng.random() < 0.5
    dy, dx = offsets if offsets is not None else (int(drawn[0]), int(drawn[1]))
    do_flip = drawn_flip if flip is None else flip
    padded = np.pad(img, ((PAD, PAD), (PAD, PAD), (0, 0)))
    out = padded[dy : dy + IMAGE_SIZE, dx : dx + IMAGE_SIZE]
    if do_flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def to_chw(images: np.ndarray) -> np.ndarray:
    """uint8 NHWC -> float32 NCHW scaled to [0, 1]."""
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=DTYPE) / DTYPE(255.0)


def to_nhwc(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_chw`: float32 NCHW in [0, 1] -> uint8 NHWC."""
    return np.ascontiguousarray(np.rint(x * 255.0).astype(np.uint8).transpose(0, 2, 3, 1))


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return make_rng(seed, _SHUFFLE_STREAM, epoch).permutation(n)


def make_batches(
    ds: Dataset,
    batch: int,
    shuffle: bool,
    augment_images: bool,
    seed: int = 0,
    epoch: int = 0,
    workers: int = 0,
) -> Iterator[Batch]:
    """Yield the batches of one epoch.

    Every batch draws its augmentation from its own generator keyed by
    ``(seed, epoch, batch index)``, so the emitted sequence is identical for
    any ``workers`` count; workers only prefetch ahead of the consumer.
    """
    if batch < 1:
        raise ValueError(f"batch size must be >= 1, got {batch}")
    if len(ds) == 0:
        raise DataError("cannot batch an empty dataset")
    order = epoch_order(len(ds), shuffle, seed, epoch)
    chunks = [order[i : i + batch] for i in range(0, len(order), batch)]

    def build(k: int) -> Batch:
        idx = chunks[k]
        images = ds.images[idx]
        if augment_images:
            rng = make_rng(seed, _AUGMENT_STREAM, epoch, k)
            images = np.stack([augment(img, rng) for img in images])
        return Batch(to_chw(images), ds.labels[idx])

    if workers <= 1:
        for k in range(len(chunks)):
            yield build(k)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        ahead = 2 * workers
        for k in range(len(chunks)):
            pending.append(pool.submit(build, k))
            if len(pending) >= ahead:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def seeded_subset(ds: Dataset, size: Optional[int], seed: int) -> Dataset:
    """First ``size`` examples after a seeded shuffle (whole set if ``size`` is None)."""
    if size is None:
        return ds
    if size > len(ds):
        raise ValueError(f"subset of {size} requested from {len(ds)} examples")
    return ds.take(make_rng(seed, _SUBSET_STREAM).permutation(len(ds))[:size])


def resolve_data_dir(data_dir=None) -> Optional[Path]:
    if data_dir:
        return Path(data_dir)
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else None


def load_splits(data_dir=None, synthetic: bool = False, synthetic_size: int = 512, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Train and test datasets from a CIFAR-10 directory or the synthetic generator."""
    if synthetic:
        return (
            synthetic_dataset(synthetic_size, seed, "train"),
            synthetic_dataset(max(synthetic_size // 4, NUM_CLASSES), seed, "test"),
        )
    directory = resolve_data_dir(data_dir)
    if directory is None:
        raise DataError(f"no data directory given (use --data-dir, ${DATA_DIR_ENV}, or --synthetic)")
    return load_cifar10(directory, "train"), load_cifar10(directory, "test")
