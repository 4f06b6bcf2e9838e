"""Dataset ingestion (IDX containers), train/test splitting and batching.

The big-endian IDX format is the single native container: magic 0x00000803
for N x H x W uint8 image stacks, 0x00000801 for label vectors, and a 4-D
extension 0x00000804 for N x H x W x C multi-channel stacks.  Pixels are
min-max scaled to [0, 1] on load (divided by 255).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError
from .tensor import Tensor4

IMAGE_MAGIC = 0x00000803
IMAGE_MAGIC_4D = 0x00000804
LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Normalized samples plus integer class labels."""

    samples: Tensor4
    labels: np.ndarray       # (N,) int64 in [0, class_count)
    class_count: int
    name: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(Tensor4(self.samples.array[idx]),
                              self.labels[idx], self.class_count, self.name)

    def filter_classes(self, classes) -> "LabeledDataset":
        wanted = set(int(c) for c in classes)
        missing = wanted - set(np.unique(self.labels).tolist())
        if missing:
            raise DataError(f"classes {sorted(missing)} absent from dataset {self.name!r}")
        mask = np.isin(self.labels, sorted(wanted))
        return self.subset(np.nonzero(mask)[0])

    def one_hot(self, indices=None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[indices]
        out = np.zeros((len(labels), self.class_count))
        out[np.arange(len(labels)), labels] = 1.0
        return out


def _read_be32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise DataError("truncated IDX header")
    return struct.unpack(">I", raw)[0]


def _read_exact(f, count: int, what: str) -> bytes:
    raw = f.read(count)
    if len(raw) != count:
        raise DataError(f"truncated IDX payload: expected {count} {what} bytes, "
                        f"got {len(raw)}")
    return raw


def load_idx_images(path) -> np.ndarray:
    """Raw (N, H, W, C) uint8 array from a 3-D or 4-D IDX image file."""
    with open(path, "rb") as f:
        magic = _read_be32(f)
        if magic == IMAGE_MAGIC:
            n, h, w = (_read_be32(f) for _ in range(3))
            c = 1
        elif magic == IMAGE_MAGIC_4D:
            n, h, w, c = (_read_be32(f) for _ in range(4))
        else:
            raise DataError(f"bad image magic 0x{magic:08x} in {path}")
        raw = _read_exact(f, n * h * w * c, "pixel")
        if f.read(1):
            raise DataError(f"trailing bytes after pixel payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, c)


def load_idx_labels(path) -> np.ndarray:
    """Raw (N,) uint8 label vector from an IDX label file."""
    with open(path, "rb") as f:
        magic = _read_be32(f)
        if magic != LABEL_MAGIC:
            raise DataError(f"bad label magic 0x{magic:08x} in {path}")
        n = _read_be32(f)
        raw = _read_exact(f, n, "label")
        if f.read(1):
            raise DataError(f"trailing bytes after label payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8)


def load_idx(images_path, labels_path, name: str = "") -> LabeledDataset:
    """Parse an IDX image/label file pair into a normalized dataset."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    samples = Tensor4(images.astype(np.float64) / 255.0)
    class_count = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(samples, labels.astype(np.int64), class_count,
                          name=name or str(images_path))


def save_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Write a dataset back to IDX files (pixels rescaled to uint8)."""
    n, h, w, c = ds.samples.shape
    pixels = np.round(ds.samples.array * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        if c == 1:
            f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        else:
            f.write(struct.pack(">IIIII", IMAGE_MAGIC_4D, n, h, w, c))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def split_train_test(ds: LabeledDataset, fraction: float,
                     seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded shuffle, then split into (train, test) at the given fraction."""
    if not 0.0 < fraction < 1.0:
        raise DomainError(f"split fraction must be in (0, 1), got {fraction}")
    n = len(ds)
    cut = int(round(n * fraction))
    if cut == 0 or cut == n:
        raise DomainError(f"degenerate split: {cut}/{n - cut} samples")
    order = np.random.default_rng(seed).permutation(n)
    return ds.subset(order[:cut]), ds.subset(order[cut:])


def epoch_batches(ds: LabeledDataset, batch_size: int, rng: np.random.Generator):
    """Yield one epoch of shuffled (Tensor4, one-hot) batches.

    The final short batch is emitted as-is.
    """
    if batch_size < 1:
        raise DomainError("batch size must be >= 1")
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield Tensor4(ds.samples.array[idx]), ds.one_hot(idx)


def batcher(ds: LabeledDataset, batch_size: int, shuffle_seed: int):
    """Endless batch iterator, reshuffled every epoch with derived seeds."""
    rng = np.random.default_rng(shuffle_seed)
    while True:
        yield from epoch_batches(ds, batch_size, rng)
