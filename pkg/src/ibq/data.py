"""Datasets: the 12-bit synthetic task, MNIST from IDX files, splits.

All randomness is drawn from :mod:`ibq.rng` streams so that a seed fully
determines the result on every platform.
"""

from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import Stream, derive_seed

SYNTHETIC_BITS = 12
IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803

_TAG_LABELS = 0x5E1
_TAG_SPLIT = 0x5E2
_TAG_SHUFFLE = 0x5E3


class IdxFormatError(ValueError):
    """Base class for malformed IDX input."""


class WrongMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    # per-sample shape before flattening, e.g. (28, 28) for MNIST
    sample_shape: tuple = ()

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.inputs.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, indices: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(
            self.inputs[indices],
            self.labels[indices],
            self.num_classes,
            name or self.name,
            self.sample_shape,
        )


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: Dataset
    test: Dataset
    seed: int
    train_indices: np.ndarray = field(repr=False)
    test_indices: np.ndarray = field(repr=False)


def all_binary_patterns(bits: int = SYNTHETIC_BITS) -> np.ndarray:
    """Every ``bits``-bit vector once, in lexicographic order."""
    return np.array(list(itertools.product((0, 1), repeat=bits)), dtype=np.float64)


def gen_synthetic(seed: int = 0) -> Dataset:
    """All 4096 12-bit patterns with a seeded, balanced, learnable label.

    The label is a threshold of a random quadratic form of the +-1 encoded
    bits: ``f(s) = s^T A s + b^T s`` with Gaussian ``A`` (symmetric, zero
    diagonal) and ``b``. The 2048 patterns with the largest ``f`` get label 1
    (ties broken by pattern index), so the classes are exactly balanced.
    """
    x = all_binary_patterns()
    s = 2.0 * x - 1.0
    n_bits = SYNTHETIC_BITS
    stream = Stream(derive_seed(_TAG_LABELS, seed))
    a = stream.truncated_normal((n_bits, n_bits), 1.0, bound=8.0)
    a = np.triu(a, 1)
    a = a + a.T
    b = stream.truncated_normal((n_bits,), 1.0, bound=8.0)
    f = np.einsum("ni,ij,nj->n", s, a, s) + s @ b
    order = np.argsort(f, kind="stable")
    labels = np.zeros(x.shape[0], dtype=np.int64)
    labels[order[x.shape[0] // 2:]] = 1
    return Dataset(x, labels, 2, f"synthetic-{seed}")


def save_synthetic(dataset: Dataset, path: str | os.PathLike) -> None:
    """One row per sample: the binary digits, a space, the label digit."""
    lines = []
    for row, y in zip(dataset.inputs.astype(np.int64), dataset.labels):
        lines.append("".join(str(v) for v in row) + f" {int(y)}\n")
    with open(path, "w", newline="\n") as f:
        f.writelines(lines)


def load_synthetic(path: str | os.PathLike, name: str | None = None) -> Dataset:
    rows, labels = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or set(parts[0]) - {"0", "1"} or not parts[1].isdigit():
                raise ValueError(f"{path}:{lineno}: expected '<binary digits> <label>'")
            rows.append([int(c) for c in parts[0]])
            labels.append(int(parts[1]))
    if len({len(r) for r in rows}) > 1:
        raise ValueError(f"{path}: rows have differing bit counts")
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(
        np.asarray(rows, dtype=np.float64),
        labels,
        max(2, int(labels.max()) + 1),
        name or os.path.basename(str(path)),
    )


def _read_idx(path, expected_magic: int, kind: str):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: truncated file (header incomplete)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise WrongMagicError(
            f"{path}: wrong magic number 0x{magic:08x} for {kind} file "
            f"(expected 0x{expected_magic:08x})"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated file (header incomplete)")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(
            f"{path}: truncated file ({len(raw) - header} of {size} data bytes)"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(
    images_path: str | os.PathLike | Sequence[str | os.PathLike],
    labels_path: str | os.PathLike | Sequence[str | os.PathLike],
    name: str = "mnist",
) -> Dataset:
    """Read IDX image/label files into a flattened dataset scaled to [0, 1].

    Either argument may be a list of paths, which are concatenated in order
    (e.g. the MNIST train and t10k files into the full 70000-sample set).
    """
    if isinstance(images_path, (str, os.PathLike)):
        images_path = [images_path]
    if isinstance(labels_path, (str, os.PathLike)):
        labels_path = [labels_path]
    images = [_read_idx(p, IDX_IMAGE_MAGIC, "image") for p in images_path]
    labels = [_read_idx(p, IDX_LABEL_MAGIC, "label") for p in labels_path]
    images = np.concatenate(images) if len(images) > 1 else images[0]
    labels = np.concatenate(labels) if len(labels) > 1 else labels[0]
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    sample_shape = tuple(images.shape[1:])
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64), 10, name, sample_shape)


def load_mnist(directory: str | os.PathLike) -> Dataset:
    """Full MNIST (train followed by t10k) from the four standard IDX files."""
    d = os.fspath(directory)
    return load_idx(
        [os.path.join(d, "train-images-idx3-ubyte"), os.path.join(d, "t10k-images-idx3-ubyte")],
        [os.path.join(d, "train-labels-idx1-ubyte"), os.path.join(d, "t10k-labels-idx1-ubyte")],
    )


def write_idx(path: str | os.PathLike, array: np.ndarray, magic: int) -> None:
    """Write a uint8 IDX file (used for fixtures and round-trip checks)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())


def split(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> SplitDataset:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    perm = Stream(derive_seed(_TAG_SPLIT, seed)).permutation(n)
    n_train = int(np.floor(n * train_fraction))
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    return SplitDataset(
        dataset.subset(train_idx, dataset.name + "/train"),
        dataset.subset(test_idx, dataset.name + "/test"),
        seed,
        train_idx,
        test_idx,
    )


def label_permutation(n: int, seed: int) -> np.ndarray:
    return Stream(derive_seed(_TAG_SHUFFLE, seed)).permutation(n)


def shuffle_labels(dataset: Dataset, seed: int) -> Dataset:
    """Copy of ``dataset`` whose labels are permuted; inputs are shared."""
    perm = label_permutation(len(dataset), seed)
    return Dataset(
        dataset.inputs,
        dataset.labels[perm].copy(),
        dataset.num_classes,
        dataset.name + f"/shuffled-{seed}",
        dataset.sample_shape,
    )
