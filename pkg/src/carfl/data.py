"""Datasets: synthetic Gaussian blobs, holdout splits and hidden-state files.

Hidden-state file layout (all little-endian)::

    b"FCHS"  u8 version=1  u32 n  u32 d  u32 n_classes
    n x (u32 label, d x f64)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from carfl.rng import Stream, derive_seed

HS_MAGIC = b"FCHS"
HS_VERSION = 1
HS_HEADER = struct.Struct("<4sBIII")


@dataclass(eq=False)
class Dataset:
    """Feature rows with integer labels; ``ids`` index a shared hidden-state table."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    ids: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if len(self.features) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("features, labels and ids must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside class range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.ids[idx])

    def same_as(self, other: "Dataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.labels, other.labels)
            and self.features.tobytes() == other.features.tobytes()
        )


def gen_synthetic(n_per_class: int, n_classes: int, d: int, spread: float,
                  seed: int) -> Dataset:
    """Isotropic Gaussian blobs around random centres on the radius-3 sphere."""
    if min(n_per_class, n_classes, d) < 1:
        raise ValueError("counts must be >= 1")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = Stream(derive_seed(seed, "blobs"))
    centers = rng.normal((n_classes, d))
    centers *= 3.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centers[labels] + spread * rng.normal((len(labels), d))
    return Dataset(features, labels, n_classes)


def blob_centers(n_classes: int, d: int, seed: int) -> np.ndarray:
    """Centres used by :func:`gen_synthetic` for the same arguments."""
    rng = Stream(derive_seed(seed, "blobs"))
    centers = rng.normal((n_classes, d))
    return centers * (3.0 / np.linalg.norm(centers, axis=1, keepdims=True))


def split_holdout(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded (train, validation) split with ``round(fraction * n)`` held out."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("holdout fraction must be in [0, 1)")
    perm = Stream(derive_seed(seed, "holdout")).permutation(len(data))
    n_val = int(round(fraction * len(data)))
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


class HiddenStateFileError(ValueError):
    pass


class BadMagicError(HiddenStateFileError):
    pass


class BadVersionError(HiddenStateFileError):
    pass


class TruncatedFileError(HiddenStateFileError):
    def __init__(self, offset: int, size: int):
        super().__init__(f"file truncated: record starting at byte offset {offset} "
                         f"is incomplete (file has {size} bytes)")
        self.offset = offset


class LabelRangeError(HiddenStateFileError):
    pass


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("x", "<f8", (d,))])


def encode_hidden_states(data: Dataset) -> bytes:
    rec = np.empty(len(data), dtype=_record_dtype(data.dim))
    rec["label"] = data.labels
    rec["x"] = data.features
    header = HS_HEADER.pack(HS_MAGIC, HS_VERSION, len(data), data.dim, data.n_classes)
    return header + rec.tobytes()


def decode_hidden_states(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != HS_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {HS_MAGIC!r}")
    if len(buf) < 5:
        raise TruncatedFileError(4, len(buf))
    if buf[4] != HS_VERSION:
        raise BadVersionError(f"unsupported version {buf[4]}, expected {HS_VERSION}")
    if len(buf) < HS_HEADER.size:
        raise TruncatedFileError(5, len(buf))
    _, _, n, d, k = HS_HEADER.unpack_from(buf)
    rec_size = 4 + 8 * d
    need = HS_HEADER.size + n * rec_size
    if len(buf) < need:
        complete = (len(buf) - HS_HEADER.size) // rec_size
        raise TruncatedFileError(HS_HEADER.size + complete * rec_size, len(buf))
    if len(buf) > need:
        raise HiddenStateFileError(f"{len(buf) - need} trailing bytes after {n} records")
    rec = np.frombuffer(buf, dtype=_record_dtype(d), count=n, offset=HS_HEADER.size)
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise LabelRangeError(f"record {bad} has label {labels[bad]} >= class count {k}")
    return Dataset(np.array(rec["x"], dtype=np.float64).reshape(n, d), labels, k)


def save_hidden_states(data: Dataset, path) -> None:
    Path(path).write_bytes(encode_hidden_states(data))


def load_hidden_states(path) -> Dataset:
    return decode_hidden_states(Path(path).read_bytes())
