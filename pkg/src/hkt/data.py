"""Datasets: synthetic generators, CIFAR-10 binary ingestion and batching."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FileLengthError, LabelRangeError, MissingFileError
from .tensor import Tensor

CIFAR_RECORD_BYTES = 3073
CIFAR_RECORDS_PER_BATCH = 10_000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "all"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if n < 1 or self.inputs.shape[0] != n:
            raise ConfigError(f"dataset needs N >= 1 matching rows, got {self.inputs.shape[0]} inputs, {n} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ConfigError(f"labels must lie in [0, {self.class_count})")
        if not np.isfinite(self.inputs).all():
            raise ConfigError("dataset inputs contain non-finite values")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, split or self.split)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def standardize(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - mean) / std


def gen_spiral(n_per_class: int, classes: int, noise_std: float, seed: int, turns: float = 1.0) -> Dataset:
    """Interleaved 2-D spiral arms, one per class.

    Arm ``k`` has radius rising linearly from 0.1 to 1 while its angle sweeps
    ``turns`` revolutions from offset ``2 pi k / classes``; ``noise_std`` is
    Gaussian jitter on the angle (radians). Features are standardized.
    """
    if n_per_class < 1 or classes < 1:
        raise ConfigError(f"spiral needs positive sizes, got n_per_class={n_per_class}, classes={classes}")
    if noise_std < 0 or turns <= 0:
        raise ConfigError(f"spiral needs noise_std >= 0 and turns > 0, got {noise_std}, {turns}")
    rng = np.random.default_rng(seed)
    r = np.linspace(0.1, 1.0, n_per_class)
    xs, ys = [], []
    for k in range(classes):
        theta = 2 * np.pi * (turns * r + k / classes) + noise_std * rng.standard_normal(n_per_class)
        xs.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
        ys.append(np.full(n_per_class, k))
    return Dataset(standardize(np.concatenate(xs)), np.concatenate(ys), classes)


def gen_textured_patches(n: int, size: int, classes: int, seed: int, noise_std: float = 0.3) -> Dataset:
    """3-channel patches whose class sets the spatial frequency of a sinusoidal grating.

    Orientation, phase and per-channel colour weights are random per sample.
    """
    if n < 1 or classes < 1:
        raise ConfigError(f"patches need n >= 1 and classes >= 1, got n={n}, classes={classes}")
    if size < 4:
        raise ConfigError(f"patch size must be >= 4, got {size}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    freqs = np.linspace(1.0, size / 4.0, classes) / size
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((n, 3, size, size))
    for i, k in enumerate(labels):
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freqs[k] * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        colour = rng.uniform(0.5, 1.5, size=3)
        out[i] = colour[:, None, None] * wave + noise_std * rng.standard_normal((3, size, size))
    return Dataset(out, labels, classes)


def split_dataset(ds: Dataset, val_fraction: float = 0.2, seed: int = 0):
    """Shuffle with ``seed`` and split into (train, val)."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_val = max(1, int(round(len(ds) * val_fraction)))
    if n_val >= len(ds):
        raise ConfigError(f"dataset of {len(ds)} samples is too small to split")
    return ds.subset(np.sort(perm[n_val:]), "train"), ds.subset(np.sort(perm[:n_val]), "val")


@dataclass
class Batch:
    x: Tensor
    labels: np.ndarray
    indices: np.ndarray


def batch_iter(ds: Dataset, batch_size: int, epoch_seed):
    """Shuffled mini-batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng(epoch_seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start:start + batch_size]
        yield Batch(Tensor(ds.inputs[idx]), ds.labels[idx], idx)


def dump_csv(ds: Dataset, path) -> Path:
    """Write one row per sample: label followed by the flattened features."""
    path = Path(path)
    flat = ds.inputs.reshape(len(ds), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(flat.shape[1])])
        for y, row in zip(ds.labels, flat):
            w.writerow([int(y)] + [repr(float(v)) for v in row])
    return path


def parse_cifar10_batch(path, records: int = CIFAR_RECORDS_PER_BATCH):
    """Parse one CIFAR-10 binary batch into (images uint8 (N, 3, 32, 32), labels)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing CIFAR-10 batch file {path}")
    raw = path.read_bytes()
    expected = records * CIFAR_RECORD_BYTES
    if len(raw) != expected:
        raise FileLengthError(f"{path.name}: {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(records, CIFAR_RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise LabelRangeError(f"{path.name}: record {bad[0]} has label {labels[bad[0]]} outside [0, 9]")
    return arr[:, 1:].reshape(records, 3, 32, 32), labels


def load_cifar10_binary(directory, records_per_batch: int = CIFAR_RECORDS_PER_BATCH):
    """Load the five training batches and the test batch, scaled to [0, 1]."""
    directory = Path(directory)
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        if not (directory / name).is_file():
            raise MissingFileError(f"missing CIFAR-10 batch file {directory / name}")
    parts = [parse_cifar10_batch(directory / f, records_per_batch) for f in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts]).astype(np.float64) / 255.0
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = parse_cifar10_batch(directory / CIFAR_TEST_FILE, records_per_batch)
    return (
        Dataset(train_x, train_y, 10, "train"),
        Dataset(test_x.astype(np.float64) / 255.0, test_y, 10, "test"),
    )


def write_cifar10_batch(path, images: np.ndarray, labels) -> Path:
    """Inverse of :func:`parse_cifar10_batch` for uint8 images (N, 3, 32, 32)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    path = Path(path)
    path.write_bytes(rec.tobytes())
    return path
