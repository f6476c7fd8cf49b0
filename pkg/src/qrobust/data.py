"""Dataset loading (CIFAR-10 binary batches, QRT1 tensor containers),
grayscale preprocessing, and K-fold splitting.

QRT1 container layout (little-endian)::

    b"QRT1" | u32 dtype code | u32 rank | rank x u32 extents | payload

dtype codes: 0 float32, 1 uint8, 2 int32, 3 float64. Labels travel in a
separate file with one unsigned byte (class index) per sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)  # channel-planar on disk
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

QRT1_MAGIC = b"QRT1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i4"), 3: np.dtype("<f8")}


class DataError(ValueError):
    pass


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class Dataset:
    """Inputs (N x H x W x C or N x D), one-hot labels (N x K) and a split tag
    per sample."""

    inputs: np.ndarray
    labels: np.ndarray
    splits: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.splits is None:
            self.splits = np.full(len(self.inputs), "all", dtype=object)
        if not (len(self.inputs) == len(self.labels) == len(self.splits)):
            raise DataError(f"inconsistent sample counts: inputs {len(self.inputs)}, labels {len(self.labels)}, splits {len(self.splits)}")
        if self.labels.ndim != 2:
            raise DataError(f"labels must be one-hot rows, got shape {self.labels.shape}")
        if len(self.labels) and not (np.all(self.labels.sum(axis=1) == 1) and np.all((self.labels == 0) | (self.labels == 1))):
            raise DataError("every label row must contain a single 1")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def class_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.inputs[index], self.labels[index], self.splits[index])

    def split(self, tag: str) -> "Dataset":
        return self.subset(np.flatnonzero(self.splits == tag))

    def select_classes(self, classes: Sequence[int], limit: Optional[int] = None) -> "Dataset":
        """Samples of the given classes, relabelled 0..len(classes)-1 in order;
        at most ``limit`` samples (first occurrences)."""
        idx = self.class_indices
        keep = np.flatnonzero(np.isin(idx, classes))
        if limit is not None:
            keep = keep[:limit]
        remap = {c: i for i, c in enumerate(classes)}
        labels = one_hot([remap[c] for c in idx[keep]], len(classes))
        return Dataset(self.inputs[keep], labels, self.splits[keep])


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw (N, 32, 32, 3) uint8 images and (N,) labels from one batch file."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise DataError(f"{path}: truncated record at byte offset {offset} ({len(raw) - offset} of {CIFAR_RECORD} bytes)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise DataError(f"{path}: label {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
    images = records[:, 1:].reshape((-1,) + CIFAR_SHAPE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels.astype(np.int64)


def load_cifar10(path) -> Dataset:
    """Load a directory holding ``data_batch_{1..5}.bin`` and/or
    ``test_batch.bin`` (or a single batch file). Images stay raw uint8 HWC."""
    path = Path(path)
    if path.is_file():
        parts = [(path, "test" if path.name == CIFAR_TEST_FILE else "train")]
    elif path.is_dir():
        parts = [(path / n, "train") for n in CIFAR_TRAIN_FILES if (path / n).exists()]
        if (path / CIFAR_TEST_FILE).exists():
            parts.append((path / CIFAR_TEST_FILE, "test"))
        if not parts:
            raise DataError(f"{path}: no CIFAR-10 batch files found")
    else:
        raise DataError(f"{path}: no such file or directory")
    images, labels, splits = [], [], []
    for file, tag in parts:
        img, lab = read_cifar_batch(file)
        images.append(img)
        labels.append(lab)
        splits.append(np.full(len(lab), tag, dtype=object))
    return Dataset(np.concatenate(images), one_hot(np.concatenate(labels), CIFAR_CLASSES), np.concatenate(splits))


def write_cifar_batch(path, images: np.ndarray, labels) -> None:
    """Inverse of :func:`read_cifar_batch` (images are N x 32 x 32 x 3 uint8)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    planar = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    Path(path).write_bytes(np.concatenate([labels[:, None], planar], axis=1).tobytes())


def preprocess(images) -> np.ndarray:
    """RGB values in [0, 255] -> grayscale in [0, 1], shape N x H x W x 1."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-1] != 3:
        raise DataError(f"preprocess expects RGB in the last axis, got shape {images.shape}")
    r, g, b = GRAY_WEIGHTS
    gray = (r * images[..., 0] + g * images[..., 1] + b * images[..., 2]) / 255.0
    return np.clip(gray, 0.0, 1.0)[..., None].astype(np.float32)


def synthetic_cifar(n_per_class: int, classes: Sequence[int] = (0, 1), seed: int = 0, jitter: float = 0.15, noise: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional grating images in the CIFAR-10 byte layout.

    Class ``c`` is a sinusoidal grating oriented near ``c * pi / 10`` with its
    own frequency, phase and tint; every sample gets a random shift (up to
    ``jitter`` of the image side), contrast and Gaussian pixel noise (``noise``
    on the [0, 1] scale). The shift moves the grating phase, so a single
    linear template does not separate the classes; orientation energy does.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    images, labels = [], []
    for c in classes:
        crng = np.random.default_rng([seed, int(c)])
        theta = np.pi * int(c) / 10 + crng.uniform(0, np.pi / 20)
        freq = crng.uniform(1.5, 3.0)
        phase = crng.uniform(0, 2 * np.pi)
        tint = crng.uniform(0.6, 1.0, size=3)
        for _ in range(n_per_class):
            dx, dy = rng.uniform(-jitter, jitter, size=2)
            u = (xx + dx) * np.cos(theta) + (yy + dy) * np.sin(theta)
            img = 0.5 + 0.5 * rng.uniform(0.4, 1.0) * np.sin(2 * np.pi * freq * u + phase)
            img = img[..., None] * tint + rng.normal(0, noise, size=(32, 32, 3))
            images.append(np.clip(img * 255.0, 0, 255).astype(np.uint8))
            labels.append(c)
    order = rng.permutation(len(labels))
    return np.stack(images)[order], np.asarray(labels, dtype=np.uint8)[order]


# ---------------------------------------------------------------------------
# QRT1 tensor container
# ---------------------------------------------------------------------------


def dumps_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = next((c for c, dt in DTYPE_CODES.items() if dt == arr.dtype.newbyteorder("<") or dt == arr.dtype), None)
    if code is None:
        raise DataError(f"dtype {arr.dtype} has no QRT1 code")
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return QRT1_MAGIC + struct.pack(f"<II{arr.ndim}I", code, arr.ndim, *arr.shape) + payload


def loads_tensor(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if raw[:4] != QRT1_MAGIC:
        raise DataError(f"{source}: bad magic {raw[:4]!r}, expected {QRT1_MAGIC!r}")
    if len(raw) < 12:
        raise DataError(f"{source}: header truncated")
    code, rank = struct.unpack_from("<II", raw, 4)
    if code not in DTYPE_CODES:
        raise DataError(f"{source}: unknown dtype code {code}")
    header = 12 + 4 * rank
    if len(raw) < header:
        raise DataError(f"{source}: header truncated (rank {rank})")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - header
    if actual != expected:
        raise DataError(f"{source}: payload has {actual} bytes, expected {expected} for shape {shape} {dtype}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(shape).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes(), str(path))


def save_tensors(path, dataset: Dataset, labels_path=None) -> Path:
    """Write inputs as QRT1 and labels as one byte per sample; returns the
    label path (default: ``<path>.labels``)."""
    labels_path = Path(labels_path) if labels_path else Path(str(path) + ".labels")
    save_tensor(path, dataset.inputs)
    labels_path.write_bytes(dataset.class_indices.astype(np.uint8).tobytes())
    return labels_path


def load_tensors(path, labels_path=None, num_classes: Optional[int] = None) -> Dataset:
    labels_path = Path(labels_path) if labels_path else Path(str(path) + ".labels")
    inputs = load_tensor(path)
    if not labels_path.exists():
        raise DataError(f"{labels_path}: label file not found")
    labels = np.frombuffer(labels_path.read_bytes(), dtype=np.uint8)
    if len(labels) != len(inputs):
        raise DataError(f"{labels_path}: {len(labels)} labels for {len(inputs)} samples")
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 1)
    return Dataset(inputs, one_hot(labels, k))


# ---------------------------------------------------------------------------
# K-fold
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray  # fold index per sample
    seed: int

    def fold(self, f: int) -> tuple[np.ndarray, np.ndarray]:
        """(train indices, validation indices) with fold ``f`` held out."""
        if not 0 <= f < self.k:
            raise IndexError(f"fold {f} outside [0, {self.k})")
        return np.flatnonzero(self.assignments != f), np.flatnonzero(self.assignments == f)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return (self.fold(f) for f in range(self.k))

    @property
    def sizes(self) -> list[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


def kfold(n: int, k: int, seed: int = 0) -> FoldPlan:
    if k < 2:
        raise DataError(f"K must be >= 2, got {k}")
    if n < k:
        raise DataError(f"need N >= K, got N={n}, K={k}")
    order = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    return FoldPlan(k, assignments, seed)


def fold_variance(per_fold_accuracies) -> float:
    """Population variance of per-fold accuracies (percentage points)."""
    acc = np.asarray(per_fold_accuracies, dtype=np.float64)
    if acc.size == 0:
        raise DataError("fold_variance needs at least one fold")
    return float(np.mean((acc - acc.mean()) ** 2))
