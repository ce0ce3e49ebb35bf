"""Datasets: MNIST IDX parsing, synthetic 2-D sets, and evaluation draws."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_ENV = "RANDLAB_DATA_DIR"

IDX_UBYTE_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
# IDX type code 0x0D (float32) with three dims; used for adversarial batches
IDX_FLOAT_IMAGES = 0x00000D03

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(Exception):
    """Base class for data acquisition / parsing failures."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], name or self.name, self.num_classes)

    def concat(self, other: "Dataset", name: str | None = None) -> "Dataset":
        return Dataset(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.labels, other.labels]),
            name or self.name,
            max(self.num_classes, other.num_classes),
        )


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def read_idx(path, expect_magic: tuple[int, ...] | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its native type."""
    blob = _read_bytes(path)
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if expect_magic is not None and magic not in expect_magic:
        want = " or ".join(f"0x{m:08X}" for m in expect_magic)
        raise IdxMagicError(f"{path}: magic 0x{magic:08X}, expected {want}")
    type_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if magic >> 16 or type_code not in dtypes or ndim == 0:
        raise IdxMagicError(f"{path}: magic 0x{magic:08X} is not an IDX header")
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    dtype = np.dtype(dtypes[type_code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(blob) - head < need:
        raise IdxTruncatedError(f"{path}: payload has {len(blob) - head} bytes, header promises {need}")
    return np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    codes = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B,
             np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}
    arr = np.asarray(array)
    code = codes[arr.dtype.newbyteorder("=")]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", (code << 8) | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder(">")).tobytes())


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    images = read_idx(images_path, expect_magic=(IDX_UBYTE_IMAGES,))
    labels = read_idx(labels_path, expect_magic=(IDX_LABELS,))
    if images.ndim != 3:
        raise IdxMagicError(f"{images_path}: expected 3 dims, got {images.ndim}")
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    num_classes = max(10, int(labels.max()) + 1) if len(labels) else 10
    return Dataset(
        (images.astype(np.float32) / 255.0)[:, None, :, :],
        labels.astype(np.int64),
        name,
        num_classes,
    )


def write_mnist_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_mnist_idx` for datasets on the 1/255 grid."""
    pixels = np.rint(dataset.images.reshape(len(dataset), *dataset.sample_shape[-2:]) * 255.0)
    write_idx(images_path, pixels.astype(np.uint8))
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def data_dir(override=None) -> Path:
    path = override or os.environ.get(DATA_ENV)
    if not path:
        raise DataError(f"no data directory: pass --data-dir or set {DATA_ENV}")
    return Path(path)


def mnist_paths(split: str, directory=None) -> tuple[Path, Path]:
    root = data_dir(directory)
    found = []
    for stem in MNIST_FILES[split]:
        for candidate in (root / stem, root / (stem + ".gz")):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise DataError(f"missing MNIST file {stem}[.gz] in {root}")
    return found[0], found[1]


def load_mnist(split: str = "train", directory=None) -> Dataset:
    return load_mnist_idx(*mnist_paths(split, directory), name=f"mnist-{split}")


# ---------------------------------------------------------------------------
# synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "blobs"
    n_per_class: int = 100
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("blobs", "circles"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


BLOB_CENTERS = np.array([[0.3, 0.3], [0.7, 0.7]])
CIRCLE_RADII = (0.15, 0.35)


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Two-class points in the unit square.

    blobs: Gaussian clouds around (0.3, 0.3) and (0.7, 0.7).
    circles: rings of radius 0.15 / 0.35 around the centre, noise added
    radially-isotropically.  Points are clipped to [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_per_class
    parts = []
    for cls in range(2):
        if spec.kind == "blobs":
            pts = BLOB_CENTERS[cls] + rng.normal(0.0, 1.0, (n, 2)) * spec.noise_std
        else:
            theta = rng.uniform(0, 2 * np.pi, n)
            pts = 0.5 + CIRCLE_RADII[cls] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
            pts = pts + rng.normal(0.0, 1.0, (n, 2)) * spec.noise_std
        parts.append(pts)
    images = np.clip(np.concatenate(parts), 0.0, 1.0).astype(np.float32)
    labels = np.repeat(np.arange(2), n)
    order = rng.permutation(2 * n)
    return Dataset(images[order], labels[order], f"{spec.kind}-{spec.noise_std:g}", 2)


# ---------------------------------------------------------------------------
# evaluation draws


def sample_indices(total: int, n: int, seed: int) -> np.ndarray:
    if n > total:
        raise ValueError(f"cannot draw {n} samples from {total}")
    if n < 0:
        raise ValueError("n must be non-negative")
    return np.random.default_rng(seed).choice(total, size=n, replace=False)


def sample_eval(dataset: Dataset, n: int, seed: int) -> Dataset:
    """``n`` samples without replacement, deterministic in ``seed``."""
    return dataset.subset(sample_indices(len(dataset), n, seed), name=f"{dataset.name}[{n}@{seed}]")


def split(dataset: Dataset, n_first: int, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle once and cut into two disjoint parts."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(order[:n_first]), dataset.subset(order[n_first:])
