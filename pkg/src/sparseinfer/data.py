"""Data containers, CSV ingestion, column normalization and the RNG contract.

Every stochastic routine in the package draws from a generator derived from a
:class:`SeedSpec`, so results are reproducible bit-for-bit across runs and
across worker-thread counts.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = ["Dataset", "SeedSpec", "load_csv", "normalize", "gaussian_stream"]

# Sub-stream tags: one namespace per purpose so adding a consumer never
# shifts the draws seen by another.
STREAM_DGP = 0
STREAM_PENALTY = 1
STREAM_CV = 2
STREAM_CRITICAL = 3
STREAM_SUBSAMPLE = 4

_MAX_U64 = 2**64


@dataclass(frozen=True)
class SeedSpec:
    """Deterministic stream address: (master_seed, stream_id).

    Streams are counter-based (Philox) keyed on the pair, so replication r
    of a study simply uses ``stream_id=r`` and parallel execution cannot
    reorder draws.
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) < _MAX_U64):
                raise ValueError(f"{name} must be an unsigned 64-bit integer")

    def with_stream(self, stream_id):
        return replace(self, stream_id=int(stream_id))

    def generator(self, purpose=0):
        """Generator for one purpose tag (< 2**16) within this stream."""
        if not (0 <= purpose < 2**16):
            raise ValueError("purpose tag out of range")
        key = ((self.stream_id << 16) | purpose) % _MAX_U64
        return np.random.Generator(np.random.Philox(key=[self.master_seed, key]))


def gaussian_stream(spec, count, purpose=0):
    """`count` i.i.d. N(0,1) draws from the stream named by `spec`."""
    if count < 0:
        raise ValueError("count must be non-negative")
    return spec.generator(purpose).standard_normal(int(count))


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Response vector plus n x p regressor matrix.

    `col_scales` holds the root-mean-square of each original column once
    :func:`normalize` has run (ones before that).  Instances are immutable
    and safe to share across threads.
    """

    y: np.ndarray
    x: np.ndarray
    col_scales: np.ndarray = None
    normalized: bool = False
    col_names: tuple = None

    def __post_init__(self):
        y = _readonly(np.asarray(self.y, dtype=np.float64).ravel())
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("x must be a 2-d array")
        x = _readonly(x)
        n, p = x.shape
        if n < 2 or p < 1:
            raise ValueError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if y.shape[0] != n:
            raise ValueError("y and x disagree on n")
        if not np.isfinite(y).all() or not np.isfinite(x).all():
            raise ValueError("non-finite entries in data")
        scales = self.col_scales
        scales = np.ones(p) if scales is None else np.asarray(scales, dtype=np.float64)
        if scales.shape != (p,) or not (scales > 0).all():
            raise ValueError("col_scales must be positive, one per column")
        if self.col_names is not None and len(self.col_names) != p:
            raise ValueError("col_names length mismatch")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "col_scales", _readonly(scales))

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    def column_name(self, j):
        return self.col_names[j] if self.col_names is not None else f"x{j + 1}"


def normalize(d):
    """Rescale columns so E_n[x_ij^2] = 1; no-op (hence idempotent) when
    the dataset is already normalized."""
    if d.normalized:
        return d
    scales = np.sqrt(np.mean(d.x * d.x, axis=0))
    bad = np.flatnonzero(scales <= 0)
    if bad.size:
        raise ValueError(f"zero-variance column {d.column_name(bad[0])!r}")
    return Dataset(
        y=d.y,
        x=d.x / scales,
        col_scales=d.col_scales * scales,
        normalized=True,
        col_names=d.col_names,
    )


def load_csv(path, response_column):
    """Read an RFC-4180-style numeric CSV (header row required) into a raw
    Dataset, keeping regressor column order.

    Rejects missing files, non-numeric cells (reported with data row and
    column), a missing response column and constant regressor columns.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty file: header row required") from None
        header = [h.strip() for h in header]
        if response_column not in header:
            raise ValueError(f"response column {response_column!r} not in header")
        rows = []
        for irow, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"row {irow}: expected {len(header)} cells, got {len(row)}")
            vals = []
            for name, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"non-numeric cell {cell!r} at row {irow}, column {name!r}"
                    ) from None
            rows.append(vals)
    if len(rows) < 2:
        raise ValueError("need at least 2 data rows")
    table = np.asarray(rows, dtype=np.float64)
    ycol = header.index(response_column)
    keep = [j for j in range(len(header)) if j != ycol]
    if not keep:
        raise ValueError("no regressor columns left")
    x = table[:, keep]
    names = tuple(header[j] for j in keep)
    for j in range(x.shape[1]):
        if np.all(x[:, j] == x[0, j]):
            raise ValueError(f"zero-variance column {names[j]!r}")
    return Dataset(y=table[:, ycol], x=x, col_names=names)
