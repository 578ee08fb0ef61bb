"""MNIST IDX ingestion, batching and the pixel-permutation control input."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataFormatError, ParameterError
from .stochastics import RngStream

IMAGES_MAGIC = 0x00000803  # 2051
LABELS_MAGIC = 0x00000801  # 2049
IMAGE_SIDE = 28

# canonical file names inside an MNIST directory
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 784) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, 9]
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 2 or self.labels.ndim != 1:
            raise DataFormatError("images must be 2-D and labels 1-D", field="shape")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels", field="count"
            )
        for arr in (self.images, self.labels):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, n: int | None) -> Dataset:
        """First ``n`` samples (all of them when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], f"{self.name}[:{n}]")


def _read_header(data: bytes, path: Path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(data) < need:
        raise DataFormatError(f"{path}: truncated header", field="header")
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise DataFormatError(f"{path}: magic number {found}, expected {magic}", field="magic")
    return struct.unpack_from(f">{ndim}I", data, 4)


def read_idx_images(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    count, rows, cols = _read_header(data, path, IMAGES_MAGIC, 3)
    if (rows, cols) != (IMAGE_SIDE, IMAGE_SIDE):
        raise DataFormatError(f"{path}: image size {rows}x{cols}, expected 28x28", field="dims")
    body = data[16:]
    expected = count * rows * cols
    if len(body) != expected:
        raise DataFormatError(
            f"{path}: {len(body)} pixel bytes, header declares {expected}", field="pixel data"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    (count,) = _read_header(data, path, LABELS_MAGIC, 1)
    body = data[8:]
    if len(body) != count:
        raise DataFormatError(f"{path}: {len(body)} label bytes, header declares {count}", field="label data")
    labels = np.frombuffer(body, dtype=np.uint8)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{path}: label value {labels.max()} out of range", field="label value")
    return labels


def load_idx(images_path: str | Path, labels_path: str | Path, name: str | None = None) -> Dataset:
    """Load an IDX image/label pair, scaling pixels by 1/255."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image count {raw.shape[0]} != label count {labels.shape[0]}", field="count"
        )
    images = raw.astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), name or Path(images_path).name)


def load_mnist_split(directory: str | Path, split: str = "test") -> Dataset:
    """Load ``train`` or ``test`` from a directory holding the standard file names."""
    if split not in MNIST_FILES:
        raise ParameterError(f"split must be one of {sorted(MNIST_FILES)}, got {split!r}")
    directory = Path(directory)
    img, lab = MNIST_FILES[split]
    return load_idx(directory / img, directory / lab, name=f"mnist-{split}")


def write_idx_images(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, IMAGE_SIDE, IMAGE_SIDE)
    header = struct.pack(">IIII", IMAGES_MAGIC, pixels.shape[0], IMAGE_SIDE, IMAGE_SIDE)
    Path(path).write_bytes(header + pixels.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def _uniform_permutations(stream: RngStream, rows: int, length: int) -> np.ndarray:
    # argsort of iid uniform keys is a uniform permutation; stable sort keeps it platform-independent
    keys = stream.uniform((rows, length))
    return np.argsort(keys, axis=1, kind="stable")


def permute_pixels(dataset: Dataset, stream: RngStream, shared: bool = False) -> Dataset:
    """New dataset with each sample's pixels randomly rearranged.

    By default each sample gets its own permutation; ``shared=True`` applies
    one permutation to every sample instead.  Labels are unchanged.
    """
    n, width = dataset.images.shape
    if shared:
        perm = _uniform_permutations(stream, 1, width)[0]
        images = dataset.images[:, perm]
    else:
        perms = _uniform_permutations(stream, n, width)
        images = np.take_along_axis(dataset.images, perms, axis=1)
    return Dataset(np.ascontiguousarray(images), dataset.labels.copy(), f"{dataset.name}:permuted")


def shuffled_indices(n: int, stream: RngStream) -> np.ndarray:
    return np.argsort(stream.uniform(n), kind="stable")


def batches(
    dataset: Dataset, batch_size: int, stream: RngStream | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` mini-batches; the last one may be short.

    With a stream the sample order is a fresh uniform shuffle, otherwise the
    stored order.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = shuffled_indices(n, stream) if stream is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
