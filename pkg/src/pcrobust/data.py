"""MNIST-family IDX loading, synthetic blobs, subsetting and batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DATA_DIR_ENV = "PC_ROBUST_DATA_DIR"


class IDXError(ValueError):
    """Base class for IDX parsing failures."""


class BadMagicError(IDXError):
    pass


class TruncatedError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, self.split)

    def astype(self, dtype) -> "LabeledDataset":
        return LabeledDataset(self.images.astype(dtype), self.labels, self.num_classes, self.split)


def _read(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expect_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedError("IDX header truncated")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise BadMagicError(f"IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedError("IDX dimension block truncated")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    payload = raw[4 + 4 * ndim :]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise TruncatedError(f"IDX payload has {len(payload)} bytes, header promises {need}")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> LabeledDataset:
    """Load an (images, labels) IDX pair; ``.gz`` files are detected by content."""
    images = parse_idx(_read(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read(labels_path), LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    k = num_classes if num_classes is not None else max(int(labels.max(initial=0)) + 1, 2)
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return LabeledDataset(x, labels.astype(np.int64), k, split)


def encode_idx(array: np.ndarray, magic: int) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    if (magic & 0xFF) != array.ndim:
        raise ValueError(f"magic 0x{magic:08x} implies {magic & 0xFF} dims, array has {array.ndim}")
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(path, array: np.ndarray, magic: int, compress: bool | None = None) -> None:
    raw = encode_idx(array, magic)
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        # no embedded name or timestamp, so identical arrays give identical files
        with open(path, "wb") as out, gzip.GzipFile(filename="", fileobj=out, mode="wb", mtime=0) as fh:
            fh.write(raw)
    else:
        path.write_bytes(raw)


def to_idx_arrays(ds: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of the 1/255 scaling (single channel only)."""
    img = np.rint(ds.images[:, 0] * 255.0).astype(np.uint8)
    return img, ds.labels.astype(np.uint8)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_root(explicit=None) -> Path:
    """Dataset root: explicit argument, then $PC_ROBUST_DATA_DIR, then ./data.

    A source checkout's own ``data/`` folder is the last resort.
    """
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    local = Path("data")
    bundled = Path(__file__).resolve().parents[2] / "data"
    return local if local.is_dir() or not bundled.is_dir() else bundled


def find_mnist(root=None, name: str = "mnist") -> Path:
    base = data_root(root)
    for cand in (base / name, base):
        if _resolve(cand, MNIST_FILES["test"][0]) is not None:
            return cand
    raise FileNotFoundError(f"no {name} IDX files under {base} (set ${DATA_DIR_ENV})")


def _resolve(folder: Path, stem: str) -> Path | None:
    for suffix in ("", ".gz"):
        p = folder / (stem + suffix)
        if p.exists():
            return p
    return None


def load_mnist(split: str = "train", root=None, name: str = "mnist") -> LabeledDataset:
    folder = find_mnist(root, name)
    img, lab = MNIST_FILES[split]
    pi, pl = _resolve(folder, img), _resolve(folder, lab)
    if pi is None or pl is None:
        raise FileNotFoundError(f"missing {split} files in {folder}")
    return load_idx(pi, pl, num_classes=10, split=split)


def synth_blobs(
    num_classes: int = 3,
    n_per_class: int = 100,
    dim: int = 16,
    spread: float = 0.05,
    seed: int = 0,
    image_shape: tuple[int, int, int] | None = None,
    split: str = "train",
) -> LabeledDataset:
    """Gaussian clusters around ``num_classes`` anchors, clipped to [0, 1].

    Anchors and samples both derive from ``seed``; :func:`synth_split` draws a
    held-out split around the same anchors.
    """
    return synth_split(num_classes, n_per_class, dim, spread, seed, seed, image_shape, split)


def synth_split(
    num_classes: int,
    n_per_class: int,
    dim: int,
    spread: float,
    anchor_seed: int,
    sample_seed: int,
    image_shape=None,
    split: str = "train",
) -> LabeledDataset:
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    shape = tuple(image_shape) if image_shape is not None else (1, 1, dim)
    if int(np.prod(shape)) != dim:
        raise ValueError(f"image_shape {shape} does not hold {dim} values")
    anchors = np.random.default_rng([anchor_seed, 0]).uniform(0.2, 0.8, (num_classes, dim))
    rng = np.random.default_rng([sample_seed, 1])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = anchors[labels] + spread * rng.standard_normal((len(labels), dim))
    x = np.clip(x, 0.0, 1.0).reshape((len(labels),) + shape)
    return LabeledDataset(x, labels.astype(np.int64), num_classes, split)


def subset(ds: LabeledDataset, n: int, seed: int = 0) -> LabeledDataset:
    """Class-stratified random subset of size ``n`` (order shuffled)."""
    if n > len(ds):
        raise ValueError(f"requested {n} samples from a dataset of {len(ds)}")
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(ds.labels == k)) for k in range(ds.num_classes)]
    # round-robin over classes keeps per-class counts within 1 when possible
    picked: list[int] = []
    depth = 0
    while len(picked) < n:
        for pool in pools:
            if depth < len(pool) and len(picked) < n:
                picked.append(int(pool[depth]))
        depth += 1
    return ds.take(rng.permutation(np.asarray(picked, dtype=np.int64)))


def batches(ds: LabeledDataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[np.ndarray]:
    """Yield index arrays partitioning ``range(len(ds))``."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(ds)) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(len(ds))
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]
