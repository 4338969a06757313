"""MNIST IDX files, seeded RMNIST/k subsets and closed-form synthetic landscapes."""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .rng import fisher_yates, stream

__all__ = [
    "IdxFormatError",
    "IdxTruncationError",
    "DatasetNotFound",
    "IdxFile",
    "parse_idx",
    "serialize_idx",
    "read_idx",
    "Dataset",
    "MNIST_FILES",
    "resolve_data_dir",
    "load_mnist",
    "rmnist_sample",
    "take",
    "Quadratic",
    "Saddle",
    "Ridge2D",
    "Quartic",
    "landscape_eval",
]

LABELS_MAGIC = 0x00000801
IMAGES_MAGIC = 0x00000803
_NDIM = {LABELS_MAGIC: 1, IMAGES_MAGIC: 3}

DATA_ENV = "GHOSTSGD_DATA_DIR"


class IdxFormatError(ValueError):
    pass


class IdxTruncationError(IdxFormatError):
    pass


class DatasetNotFound(FileNotFoundError):
    pass


@dataclass(frozen=True)
class IdxFile:
    magic: int
    dims: tuple[int, ...]
    payload: bytes = field(repr=False)

    def array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.dims)


def parse_idx(raw: bytes) -> IdxFile:
    """Validate and decode an unsigned-byte IDX file (magic 0x801 or 0x803)."""
    if len(raw) < 8:
        raise IdxTruncationError(f"IDX file needs at least 8 bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in _NDIM:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x}; expected 0x00000801 or 0x00000803")
    ndim = _NDIM[magic]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncationError(f"IDX header needs {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - header
    if actual != expected:
        raise IdxTruncationError(
            f"IDX payload length mismatch: expected {expected} bytes for dims {dims}, got {actual}")
    return IdxFile(magic, tuple(dims), bytes(raw[header:]))


def serialize_idx(idx: IdxFile) -> bytes:
    return struct.pack(f">I{len(idx.dims)}I", idx.magic, *idx.dims) + idx.payload


def read_idx(path: str | os.PathLike) -> tuple[IdxFile, str]:
    """Parse an IDX file (raw or gzipped). Returns the file and the sha256 of its raw bytes."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw), hashlib.sha256(raw).hexdigest()


@dataclass
class Dataset:
    images: np.ndarray  # N×1×28×28, float64 in [0, 1] (uint8 for raw sources)
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def as_float(self) -> "Dataset":
        if self.images.dtype == np.float64:
            return self
        return Dataset(self.images.astype(np.float64) / 255.0, self.labels, dict(self.provenance))


# official names; alternative spellings seen in redistributions are accepted too
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def resolve_data_dir(data_dir: str | os.PathLike | None = None) -> Path:
    if data_dir:
        return Path(data_dir).expanduser()
    if os.environ.get(DATA_ENV):
        return Path(os.environ[DATA_ENV]).expanduser()
    return Path.home() / ".cache" / "ghostsgd" / "mnist"


def _find(directory: Path, stem: str) -> Path:
    dotted = stem.replace("-idx", ".idx")
    for name in (stem, stem + ".gz", dotted, dotted + ".gz"):
        if (directory / name).is_file():
            return directory / name
    raise DatasetNotFound(
        f"{stem} not found in {directory}; run `ghostsgd data fetch --dest {directory}` "
        f"or point {DATA_ENV} at a directory with the MNIST IDX files")


def load_mnist(split: str = "train", data_dir=None) -> Dataset:
    """Load an MNIST split as raw uint8 images (N×1×28×28) and integer labels."""
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    directory = resolve_data_dir(data_dir)
    img_idx, img_sha = read_idx(_find(directory, MNIST_FILES[f"{split}_images"]))
    lab_idx, lab_sha = read_idx(_find(directory, MNIST_FILES[f"{split}_labels"]))
    if img_idx.magic != IMAGES_MAGIC or lab_idx.magic != LABELS_MAGIC:
        raise IdxFormatError("image/label files are swapped or of the wrong kind")
    if img_idx.dims[0] != lab_idx.dims[0]:
        raise IdxFormatError(f"{img_idx.dims[0]} images but {lab_idx.dims[0]} labels")
    if img_idx.dims[1:] != (28, 28):
        raise IdxFormatError(f"MNIST images must be 28×28, got {img_idx.dims[1:]}")
    labels = lab_idx.array().astype(np.int64)
    if labels.max(initial=0) > 9:
        raise IdxFormatError(f"label values must be in 0..9, found {labels.max()}")
    images = img_idx.array().reshape(-1, 1, 28, 28)
    return Dataset(images, labels, {
        "split": split,
        "images_sha256": img_sha,
        "labels_sha256": lab_sha,
        "scaling": "x/255",
    })


def rmnist_sample(source: Dataset, per_class: int, seed: int, classes: int = 10) -> Dataset:
    """Draw exactly ``per_class`` examples of each class without replacement.

    Each class is shuffled by Fisher–Yates on its own named stream, and the
    first ``per_class`` indices are kept. Output is ordered by class, then draw.
    """
    picked = []
    for k in range(classes):
        idx = np.flatnonzero(source.labels == k)
        if len(idx) < per_class:
            raise ContractError(f"class {k} has {len(idx)} examples, fewer than {per_class}")
        perm = fisher_yates(len(idx), stream(seed, f"rmnist/class{k}"))
        picked.append(idx[perm[:per_class]])
    index = np.concatenate(picked)
    sub = take(source, index).as_float()
    sub.provenance.update({"per_class": per_class, "sampler_seed": seed, "indices_sha256":
                           hashlib.sha256(index.astype("<i8").tobytes()).hexdigest()})
    sub.provenance["indices"] = index
    return sub


def take(source: Dataset, index) -> Dataset:
    index = np.asarray(index)
    return Dataset(source.images[index], source.labels[index], dict(source.provenance))


# ---------------------------------------------------------------- synthetic landscapes

@dataclass(frozen=True)
class Quadratic:
    """f(w) = ½ wᵀ H w."""

    hessian: np.ndarray

    @classmethod
    def diagonal(cls, spectrum) -> "Quadratic":
        return cls(np.diag(np.asarray(spectrum, dtype=np.float64)))

    def evaluate(self, w):
        w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        H = np.asarray(self.hessian, dtype=np.float64)
        g = H @ w
        return 0.5 * float(w @ g), g, H


@dataclass(frozen=True)
class Saddle:
    """f(w) = ½ (w₁² − w₂²)."""

    def evaluate(self, w):
        w = np.asarray(w, dtype=np.float64)
        H = np.diag([1.0, -1.0])
        return 0.5 * float(w[0] ** 2 - w[1] ** 2), H @ w, H


@dataclass(frozen=True)
class Ridge2D:
    """f(w) = (w₁² − 1)² − tilt·w₁ + ½·curv·w₂²: two unequal wells split by a ridge near w₁ = 0."""

    tilt: float = 0.3
    curv: float = 1.0

    def evaluate(self, w):
        w1, w2 = np.asarray(w, dtype=np.float64)
        f = (w1 * w1 - 1.0) ** 2 - self.tilt * w1 + 0.5 * self.curv * w2 * w2
        g = np.array([4.0 * w1 * (w1 * w1 - 1.0) - self.tilt, self.curv * w2])
        H = np.array([[12.0 * w1 * w1 - 4.0, 0.0], [0.0, self.curv]])
        return float(f), g, H

    def critical_points(self) -> tuple[float, float, float]:
        """w₁ of (left well, ridge, right well): real roots of 4w³ − 4w − tilt."""
        roots = np.sort(np.roots([4.0, 0.0, -4.0, -self.tilt]).real)
        return tuple(float(r) for r in roots)


@dataclass(frozen=True)
class Quartic:
    """f(w) = Σ wᵢ⁴."""

    def evaluate(self, w):
        w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        return float(np.sum(w ** 4)), 4.0 * w ** 3, np.diag(12.0 * w ** 2)


def landscape_eval(landscape, w):
    """(f, ∇f, ∇²f) of a synthetic landscape at ``w``."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ContractError("landscape point must be finite")
    return landscape.evaluate(w)
