"""Dataset container, [0, 1] scaling, twin-pair construction and file formats.

Binary layout (all little-endian)::

    b"DRSA" | u32 version | u64 n_rows | u64 n_cols | f64[n_rows * n_cols]
    | u64 trailer_len | trailer (UTF-8 JSON: scaling, splits, provenance)
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateError, DimensionError, FormatError

MAGIC = b"DRSA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
_LEN = struct.Struct("<Q")

SPLIT_ORDER = ("train", "validation", "test")


@dataclass
class Dataset:
    data: np.ndarray
    feature_min: np.ndarray | None = None
    feature_max: np.ndarray | None = None
    splits: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionError(f"dataset must be a 2-D matrix, got shape {self.data.shape}")
        if (self.feature_min is None) != (self.feature_max is None):
            raise ValueError("feature_min and feature_max must be given together")
        if self.feature_min is not None:
            self.feature_min = np.asarray(self.feature_min, dtype=np.float64)
            self.feature_max = np.asarray(self.feature_max, dtype=np.float64)
        self.splits = {k: (int(a), int(b)) for k, (a, b) in self.splits.items()}
        check_splits(self.splits, self.n_samples)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_features(self) -> int:
        return self.data.shape[1]

    @property
    def scaled(self) -> bool:
        return self.feature_min is not None

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise KeyError(f"dataset has no split {name!r} (have {sorted(self.splits)})")
        a, b = self.splits[name]
        return self.data[a:b]

    def raw(self) -> np.ndarray:
        """Data in original units (identity when no scaling metadata)."""
        if not self.scaled:
            return self.data.copy()
        return unscale(self.data, self.feature_min, self.feature_max)

    def checksum(self) -> str:
        return hashlib.sha256(self.data.astype("<f8").tobytes()).hexdigest()


def check_splits(splits: dict, n_samples: int):
    ranges = sorted(splits.items(), key=lambda kv: kv[1])
    end = 0
    for name, (a, b) in ranges:
        if a < end or b < a:
            raise ValueError(f"split {name!r} [{a}, {b}) overlaps or is reversed")
        end = b
    if end > n_samples:
        raise ValueError(f"splits cover {end} rows but dataset has {n_samples}")


def split_sizes(n: int, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Contiguous train/validation/test ranges in temporal order."""
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    out, start = {}, 0
    for name, size in zip(SPLIT_ORDER, (n_train, n_val, n - n_train - n_val)):
        out[name] = (start, start + size)
        start += size
    return out


def scale_01(data: np.ndarray):
    """Per-feature affine map onto [0, 1]; returns ``(scaled, fmin, fmax)``."""
    data = np.asarray(data, dtype=np.float64)
    fmin = data.min(axis=0)
    fmax = data.max(axis=0)
    flat = np.flatnonzero(~(fmax > fmin))
    if flat.size:
        raise DegenerateError(f"feature column {int(flat[0])} is constant; cannot scale")
    return (data - fmin) / (fmax - fmin), fmin, fmax


def unscale(scaled: np.ndarray, fmin: np.ndarray, fmax: np.ndarray) -> np.ndarray:
    return scaled * (fmax - fmin) + fmin


@dataclass
class PairedDataset:
    """Rows of one split next to a fixed permutation of the same rows."""

    primary: np.ndarray
    shuffled: np.ndarray
    permutation: np.ndarray
    permutation_seed: int
    split: str = ""

    def permutation_digest(self) -> str:
        return hashlib.sha256(self.permutation.astype("<i8").tobytes()).hexdigest()


def make_shuffled_pairs(dataset: Dataset, split: str, seed: int) -> PairedDataset:
    rows = dataset.split(split)
    if rows.shape[0] == 0:
        raise DegenerateError(f"split {split!r} is empty")
    perm = np.random.default_rng(seed).permutation(rows.shape[0])
    return PairedDataset(rows, rows[perm], perm, int(seed), split)


def _trailer(dataset: Dataset) -> dict:
    return {
        "feature_min": None if dataset.feature_min is None else dataset.feature_min.tolist(),
        "feature_max": None if dataset.feature_max is None else dataset.feature_max.tolist(),
        "splits": {k: list(v) for k, v in dataset.splits.items()},
        "provenance": dataset.provenance,
    }


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_bytes(dataset: Dataset) -> bytes:
    n, d = dataset.data.shape
    trailer = json.dumps(_trailer(dataset), sort_keys=True).encode("utf-8")
    return b"".join([
        _HEADER.pack(MAGIC, FORMAT_VERSION, n, d),
        dataset.data.astype("<f8").tobytes(),
        _LEN.pack(len(trailer)),
        trailer,
    ])


def save_dataset(dataset: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_bytes(dataset))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than dataset header", offset=len(buf))
    magic, version, n, d = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    pos = _HEADER.size
    nbytes = n * d * 8
    if len(buf) < pos + nbytes + _LEN.size:
        raise FormatError(f"truncated data block ({n}x{d} floats expected)", offset=len(buf))
    data = np.frombuffer(buf, dtype="<f8", count=n * d, offset=pos).reshape(n, d)
    pos += nbytes
    (tlen,) = _LEN.unpack_from(buf, pos)
    pos += _LEN.size
    if len(buf) != pos + tlen:
        raise FormatError(
            f"trailer length {tlen} does not match remaining {len(buf) - pos} bytes", offset=pos
        )
    try:
        meta = json.loads(buf[pos:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid JSON trailer: {exc}", offset=pos) from exc
    return Dataset(
        data.astype(np.float64),
        feature_min=meta.get("feature_min"),
        feature_max=meta.get("feature_max"),
        splits={k: tuple(v) for k, v in meta.get("splits", {}).items()},
        provenance=meta.get("provenance", {}),
    )


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_csv(path) -> Dataset:
    """Read comma-separated numeric rows; a non-numeric first line is a header."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header = None
    if rows and not all(_is_number(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric value ({exc})") from exc
    if data.ndim != 2 or data.size == 0:
        raise FormatError(f"{path}: no numeric rows")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    prov = {"source": str(path), "sha256": digest}
    if header:
        prov["columns"] = header
    return Dataset(data, provenance=prov)
