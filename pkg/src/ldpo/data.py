"""Corpus containers, feature/label file I/O, and seeded dataset splitting."""

from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1

SPLIT_TAGS = ("train", "val", "test")


class LoadError(ValueError):
    """A feature or label file failed to parse or validate."""


@dataclass
class FeatureMatrix:
    """N items, each a D-dimensional real feature vector, with stable string ids."""

    ids: list[str]
    values: np.ndarray  # (N, D) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"feature values must be 2-D, got shape {self.values.shape}")
        n, d = self.values.shape
        if n < 1 or d < 1:
            raise ValueError(f"feature matrix must be at least 1x1, got {n}x{d}")
        self.ids = list(self.ids)
        if len(self.ids) != n:
            raise ValueError(f"{len(self.ids)} ids for {n} rows")
        seen = set()
        for i, item_id in enumerate(self.ids):
            if item_id in seen:
                raise ValueError(f"duplicate id {item_id!r} at row {i}")
            seen.add(item_id)
        if not np.isfinite(self.values).all():
            row, col = np.argwhere(~np.isfinite(self.values))[0]
            raise ValueError(f"non-finite value at row {row}, column {col}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def subset(self, indices) -> "FeatureMatrix":
        indices = np.asarray(indices, dtype=np.intp)
        return FeatureMatrix(
            ids=[self.ids[i] for i in indices],
            values=self.values[indices],
        )


@dataclass
class DescriptorGrid:
    """Local descriptors of one item: the per-location activations of a conv layer.

    Stored as a flat (n_locations, d) row matrix; the encoders treat the rows
    as an unordered set, so the original s x s layout is not retained.
    """

    item_id: str
    descriptors: np.ndarray  # (n_locations, d) float64

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2:
            raise ValueError("descriptors must be a 2-D row matrix")
        n, d = self.descriptors.shape
        if n < 1 or d < 1:
            raise ValueError(f"descriptor grid must be at least 1x1, got {n}x{d}")
        if not np.isfinite(self.descriptors).all():
            raise ValueError(f"non-finite descriptor in grid {self.item_id!r}")

    @classmethod
    def from_grid(cls, item_id: str, grid) -> "DescriptorGrid":
        """Build from an (s, s, d) activation grid."""
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3:
            raise ValueError("grid must have shape (s, s, d)")
        s1, s2, d = grid.shape
        return cls(item_id=item_id, descriptors=grid.reshape(s1 * s2, d))


@dataclass
class SplitAssignment:
    """Per-item train/val/test tags, in item order, plus the shuffle seed used."""

    tags: list[str]
    seed: int

    def __post_init__(self):
        bad = [t for t in self.tags if t not in SPLIT_TAGS]
        if bad:
            raise ValueError(f"unknown split tag {bad[0]!r}")

    def indices(self, tag: str) -> np.ndarray:
        if tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {tag!r}")
        return np.array([i for i, t in enumerate(self.tags) if t == tag], dtype=np.intp)

    def counts(self) -> dict[str, int]:
        return {tag: sum(1 for t in self.tags if t == tag) for tag in SPLIT_TAGS}


@dataclass
class TextCorpus:
    """Map from item id to its document as an ordered, normalized token list."""

    docs: dict[str, list[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.docs)


def _shuffled_indices(n: int, seed: int) -> np.ndarray:
    """Seeded Fisher-Yates shuffle of range(n)."""
    rng = np.random.default_rng(seed)
    order = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def split_dataset(n: int, ratios: tuple[float, float, float], seed: int) -> SplitAssignment:
    """Partition n items into train/val/test groups by a seeded shuffle.

    Group sizes are floor(n * ratio) for val and test; remainder items go to
    train (the largest group). Deterministic given (n, ratios, seed).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    r_train, r_val, r_test = ratios
    if min(r_train, r_val, r_test) < 0:
        raise ValueError("ratios must be nonnegative")
    if abs(r_train + r_val + r_test - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {r_train + r_val + r_test}")
    # epsilon absorbs float dust so exact products like 20 * 0.7 floor to 14
    n_val = int(math.floor(n * r_val + 1e-9))
    n_test = int(math.floor(n * r_test + 1e-9))
    n_train = n - n_val - n_test

    order = _shuffled_indices(n, seed)
    tags = [""] * n
    for pos, idx in enumerate(order):
        if pos < n_train:
            tags[idx] = "train"
        elif pos < n_train + n_val:
            tags[idx] = "val"
        else:
            tags[idx] = "test"
    return SplitAssignment(tags=tags, seed=seed)


# ---------------------------------------------------------------------------
# fmat binary format: b"FMAT", u32 version (=1), u32 rows, u32 cols, then
# rows*cols little-endian float64 values row-major. Item ids, when present,
# live in a sidecar "<path>.ids" with one id per line.
# ---------------------------------------------------------------------------


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def write_fmat(path: str, values: np.ndarray) -> None:
    """Write a bare matrix in fmat format (no id sidecar)."""
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim == 1:
        values = values.reshape(1, -1)
    if values.ndim != 2:
        raise ValueError("fmat payload must be 1-D or 2-D")
    rows, cols = values.shape
    header = FMAT_MAGIC + struct.pack("<III", FMAT_VERSION, rows, cols)
    _atomic_write_bytes(path, header + values.tobytes(order="C"))


def read_fmat(path: str) -> np.ndarray:
    """Read a bare fmat matrix."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != FMAT_MAGIC:
        raise LoadError(f"{path}: not an fmat file (bad magic)")
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != FMAT_VERSION:
        raise LoadError(f"{path}: unsupported fmat version {version}")
    expected = 16 + rows * cols * 8
    if len(data) != expected:
        raise LoadError(f"{path}: expected {expected} bytes for {rows}x{cols}, got {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64).reshape(rows, cols)


def save_feature_matrix(m: FeatureMatrix, path: str, format: str = "fmat") -> None:
    """Write a FeatureMatrix; 'fmat' round-trips bit-exactly, 'csv' to 17 significant digits."""
    if m.n < 1 or m.dim < 1:
        raise ValueError("refusing to write an empty feature matrix")
    if format == "fmat":
        write_fmat(path, m.values)
        _atomic_write_text(path + ".ids", "".join(i + "\n" for i in m.ids))
    elif format == "csv":
        lines = ["id," + ",".join(f"f{j}" for j in range(m.dim))]
        for item_id, row in zip(m.ids, m.values):
            lines.append(item_id + "," + ",".join(f"{v:.17g}" for v in row))
        _atomic_write_text(path, "\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown feature format {format!r}")


def load_feature_matrix(path: str, format: str = "fmat") -> FeatureMatrix:
    """Read a FeatureMatrix written by :func:`save_feature_matrix`."""
    if format == "fmat":
        values = read_fmat(path)
        ids_path = path + ".ids"
        if not os.path.exists(ids_path):
            raise LoadError(f"{path}: missing id sidecar {ids_path}")
        with open(ids_path, "r", encoding="utf-8") as fh:
            ids = [line.rstrip("\n") for line in fh]
        ids = [i for i in ids if i != ""] if ids and ids[-1] == "" else ids
        if len(ids) != values.shape[0]:
            raise LoadError(f"{path}: {len(ids)} ids for {values.shape[0]} rows")
    elif format == "csv":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise LoadError(f"{path}: empty file") from None
            if not header or header[0] != "id":
                raise LoadError(f"{path}: malformed header, first column must be 'id'")
            for j, name in enumerate(header[1:]):
                if name != f"f{j}":
                    raise LoadError(
                        f"{path}: malformed header, expected 'f{j}' at column {j + 1}, got {name!r}"
                    )
            d = len(header) - 1
            if d < 1:
                raise LoadError(f"{path}: malformed header, no feature columns")
            ids, rows = [], []
            for rownum, rec in enumerate(reader):
                if not rec:
                    continue
                if len(rec) != d + 1:
                    raise LoadError(f"{path}: row {rownum} has {len(rec)} fields, expected {d + 1}")
                ids.append(rec[0])
                try:
                    rows.append([float(v) for v in rec[1:]])
                except ValueError as exc:
                    raise LoadError(f"{path}: row {rownum}: {exc}") from None
            if not ids:
                raise LoadError(f"{path}: no data rows")
            values = np.array(rows, dtype=np.float64)
    else:
        raise ValueError(f"unknown feature format {format!r}")
    try:
        return FeatureMatrix(ids=ids, values=values)
    except ValueError as exc:
        raise LoadError(f"{path}: {exc}") from None


def save_split(split: SplitAssignment, ids: list[str], path: str) -> None:
    """Write a split file: csv with header id,split."""
    if len(ids) != len(split.tags):
        raise ValueError(f"{len(ids)} ids for {len(split.tags)} split tags")
    lines = ["id,split"]
    lines.extend(f"{item_id},{tag}" for item_id, tag in zip(ids, split.tags))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_split(path: str, seed: int = -1) -> tuple[list[str], SplitAssignment]:
    """Read a split file; returns (ids, split). Seed is not stored in the file."""
    ids, tags = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "split"]:
            raise LoadError(f"{path}: malformed header, expected 'id,split'")
        for rownum, rec in enumerate(reader):
            if not rec:
                continue
            if len(rec) != 2:
                raise LoadError(f"{path}: row {rownum} has {len(rec)} fields, expected 2")
            if rec[1] not in SPLIT_TAGS:
                raise LoadError(f"{path}: row {rownum}: unknown split tag {rec[1]!r}")
            ids.append(rec[0])
            tags.append(rec[1])
    if not ids:
        raise LoadError(f"{path}: no data rows")
    return ids, SplitAssignment(tags=tags, seed=seed)
