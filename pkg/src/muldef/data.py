"""Dataset loading, synthetic data and seeded subsetting.

Pixels are scaled into [0, 1] by dividing raw bytes by 255. Images are kept
channels-last: MNIST examples are (28, 28, 1), CIFAR-10 examples (32, 32, 3).
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Examples ``x`` (n, *shape) in [0, 1] with integer labels ``y``."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = "data"
    split: str = "train"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} examples but {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def take(self, idx, name: str | None = None, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], self.num_classes,
                       name or self.name, split or self.split)

    def with_split(self, split: str) -> "Dataset":
        return Dataset(self.x, self.y, self.num_classes, self.name, split)


def concat(sets: Sequence[Dataset], name: str | None = None) -> Dataset:
    first = sets[0]
    for s in sets[1:]:
        if s.shape != first.shape or s.num_classes != first.num_classes:
            raise ValueError("cannot concatenate datasets of different shapes or class counts")
    x = np.concatenate([s.x for s in sets]).astype(np.float32, copy=False)
    y = np.concatenate([s.y for s in sets])
    return Dataset(x, y, first.num_classes, name or first.name, first.split)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError("IDX file shorter than its magic number")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataFormatError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise DataFormatError(f"truncated IDX payload: header declares {count} bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> Dataset:
    """Load an IDX image/label pair (optionally gzip-compressed)."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[..., None]
    y = labels.astype(np.int64)
    return Dataset(x, y, 10, name, split)


def load_cifar_binary(paths: Sequence, name: str = "cifar10", split: str = "train") -> Dataset:
    """Load CIFAR-10 binary batches: 1 label byte + 3072 channel-major pixel bytes per record."""
    xs, ys = [], []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    x = np.concatenate(xs).astype(np.float32) / 255.0
    y = np.concatenate(ys)
    if y.size and y.max() >= 10:
        raise DataFormatError("CIFAR-10 label byte out of range")
    return Dataset(x, y, 10, name, split)


def data_dir(default: str | os.PathLike | None = None) -> Path:
    """Dataset root: ``$MULDEF_DATA_DIR``, else ``default``, else ``./data``."""
    env = os.environ.get("MULDEF_DATA_DIR")
    if env:
        return Path(env)
    return Path(default) if default is not None else Path("data")


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz", root / "mnist" / stem, root / "mnist" / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def load_mnist(split: str = "train", root=None) -> Dataset:
    root = data_dir(root)
    img, lab = MNIST_FILES[split]
    return load_idx(_find(root, img), _find(root, lab), "mnist", split)


def load_cifar10(split: str = "train", root=None) -> Dataset:
    root = data_dir(root)
    base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").exists() else root
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    return load_cifar_binary([base / n for n in names], "cifar10", split)


def synth_blobs(num_classes: int, n_per_class: int, dim: int, spread: float,
                seed: int = 0, image_shape: tuple | None = None) -> Dataset:
    """Gaussian clusters around seeded centers in [0.2, 0.8]^dim, clipped to [0, 1].

    ``image_shape`` reshapes each example (its size must equal ``dim``) so the
    blobs can feed convolutional networks.
    """
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = centers[y] + spread * rng.standard_normal((len(y), dim))
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    if image_shape is not None:
        x = x.reshape((len(y),) + tuple(image_shape))
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm].astype(np.int64), num_classes, "blobs", "train")


def balanced_indices(y: np.ndarray, n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    if n > len(y):
        raise ValueError(f"cannot sample {n} of {len(y)} examples")
    pools = [rng.permutation(np.flatnonzero(y == c)) for c in range(num_classes)]
    quota = np.zeros(num_classes, dtype=int)
    remaining = n
    # water-fill: equal shares, capped by class availability
    while remaining:
        open_ = [c for c in range(num_classes) if quota[c] < len(pools[c])]
        share = max(1, remaining // len(open_))
        order = rng.permutation(open_)
        for c in order:
            take = min(share, len(pools[c]) - quota[c], remaining)
            quota[c] += take
            remaining -= take
            if not remaining:
                break
    picked = np.concatenate([pools[c][:quota[c]] for c in range(num_classes)])
    return rng.permutation(picked)


def sample_subset(data: Dataset, n: int, seed: int) -> Dataset:
    """Seeded class-balanced sample of ``n`` examples without replacement."""
    rng = np.random.default_rng(seed)
    return data.take(balanced_indices(data.y, n, data.num_classes, rng))


def sample_indices(data: Dataset, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return balanced_indices(data.y, n, data.num_classes, rng)


def load_desk_mnist(n_train: int = 12000, n_test: int = 2000, seed: int = 0, root=None):
    """Class-balanced MNIST train/test subsets used for desk-scale experiments."""
    tr = sample_subset(load_mnist("train", root), n_train, seed)
    te = sample_subset(load_mnist("test", root), n_test, seed + 1)
    return tr, te
