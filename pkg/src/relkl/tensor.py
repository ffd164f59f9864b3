"""Dense numerics substrate: 2-D buffers, visibility masks, masked reductions.

Matrices are plain ``numpy.ndarray`` objects; the dtype is the precision tag
(``float32`` = single, ``float64`` = double).  Every reduction accumulates in
float64 whatever the storage precision is.

Masked positions are *excluded* from reductions rather than being filled with
``-inf``; values sitting at invisible positions are never read arithmetically.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateRowError, InputError, ShapeError

PRECISIONS = {"single": np.dtype(np.float32), "double": np.dtype(np.float64)}
_TAG_BY_PRECISION = {"single": 4, "double": 8}
_PRECISION_BY_TAG = {4: "single", 8: "double"}
RKT_MAGIC = b"RKT1"


@dataclass(frozen=True)
class PrecisionPolicy:
    """Storage precision for buffers; accumulation is always double."""

    storage: str = "double"
    accumulate: str = "double"

    def __post_init__(self):
        if self.storage not in PRECISIONS:
            raise ValueError(f"unknown storage precision {self.storage!r}")
        if self.accumulate != "double":
            raise ValueError("accumulation precision must be double")

    @property
    def dtype(self) -> np.dtype:
        return PRECISIONS[self.storage]

    def cast(self, a) -> np.ndarray:
        return np.ascontiguousarray(a, dtype=self.dtype)


def precision_of(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "single"
    if a.dtype == np.float64:
        return "double"
    raise ShapeError(f"unsupported dtype {a.dtype}")


def as_tensor(a, precision: str | None = None, name: str = "tensor") -> np.ndarray:
    """Validate ``a`` as a finite 2-D matrix and return it in the requested precision.

    Without ``precision``, float32/float64 inputs keep their dtype and anything
    else is promoted to float64.
    """
    arr = np.asarray(a)
    if precision is not None:
        arr = arr.astype(PRECISIONS[precision], copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True, eq=False)
class MaskSpec:
    """Causal and padding visibility.

    ``visible(i, j) = valid[i] and valid[j] and (not causal or j <= i)``.
    """

    n: int
    causal: bool = True
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n < 1:
            raise ShapeError("mask length must be >= 1")
        valid = np.ones(self.n, dtype=bool) if self.valid is None else np.array(self.valid, dtype=bool)
        if valid.shape != (self.n,):
            raise ShapeError(f"valid has shape {valid.shape}, expected ({self.n},)")
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def padded(cls, n: int, length: int, causal: bool = True) -> "MaskSpec":
        """Mask whose first ``length`` positions are real tokens and the rest padding."""
        valid = np.arange(n) < length
        return cls(n, causal, valid)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def visible(self, i: int, j: int) -> bool:
        return bool(self.valid[i] and self.valid[j] and (not self.causal or j <= i))

    def block(self, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
        """Visibility of the tile rows ``r0:r1`` x cols ``c0:c1``."""
        vis = self.valid[r0:r1, None] & self.valid[None, c0:c1]
        if self.causal:
            vis = vis & (np.arange(c0, c1)[None, :] <= np.arange(r0, r1)[:, None])
        return vis

    def dense(self) -> np.ndarray:
        return self.block(0, self.n, 0, self.n)

    def check(self) -> None:
        """Raise :class:`DegenerateRowError` for the first valid row with no visible key."""
        counts = self.visible_counts()
        bad = np.flatnonzero(self.valid & (counts == 0))
        if bad.size:
            raise DegenerateRowError(int(bad[0]))

    def visible_counts(self) -> np.ndarray:
        if not self.valid.any():
            return np.zeros(self.n, dtype=np.int64)
        if self.causal:
            counts = np.cumsum(self.valid)
        else:
            counts = np.full(self.n, self.valid.sum())
        return np.where(self.valid, counts, 0)


@dataclass(frozen=True, eq=False)
class RowStats:
    """Per-row log-sum-exp; NaN marks invalid rows and is never read downstream."""

    lse: np.ndarray

    @property
    def n(self) -> int:
        return self.lse.shape[0]


def matmul_scaled(X, Y, scale: float | None = None) -> np.ndarray:
    """``scale * X @ Y.T`` accumulated in double; ``scale`` defaults to 1/sqrt(d)."""
    X = np.asarray(X)
    Y = np.asarray(Y)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ShapeError(f"cannot form X @ Y.T for shapes {X.shape} and {Y.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(X.shape[1])
    return (X.astype(np.float64) @ Y.astype(np.float64).T) * scale


def masked_row_softmax(Z, mask: MaskSpec) -> np.ndarray:
    """Row softmax over visible entries; invisible entries and invalid rows are 0."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape != (mask.n, mask.n):
        raise ShapeError(f"logits shape {Z.shape} does not match mask length {mask.n}")
    mask.check()
    vis = mask.dense()
    Zm = np.where(vis, Z, -np.inf)
    row_max = Zm.max(axis=1, keepdims=True)
    row_max[~mask.valid] = 0.0
    e = np.exp(Zm - row_max)
    denom = e.sum(axis=1, keepdims=True)
    denom[~mask.valid] = 1.0
    return e / denom


def lse_update(m: np.ndarray, s: np.ndarray, logits: np.ndarray, vis: np.ndarray):
    """One streaming step of the running-max log-sum-exp.

    ``m`` and ``s`` hold, per row, the running maximum and the sum of
    ``exp(z - m)`` over everything seen so far.  ``logits`` is a block of new
    values with visibility ``vis``; invisible values are ignored.  Returns the
    updated ``(m, s)``.
    """
    zm = np.where(vis, logits, -np.inf)
    block_max = zm.max(axis=1)
    m_new = np.maximum(m, block_max)
    # Rows that have seen nothing yet keep m = -inf; shift them by 0 instead.
    ref = np.where(np.isneginf(m_new), 0.0, m_new)
    s_new = s * np.exp(m - ref) + np.exp(zm - ref[:, None]).sum(axis=1)
    return m_new, s_new


def row_logsumexp(supplier, mask: MaskSpec) -> RowStats:
    """Streaming per-row log-sum-exp.

    ``supplier(i)`` returns an iterable of 1-D blocks holding the visible logits
    of row ``i`` in key-block order.  Invalid rows are skipped and get NaN.
    """
    lse = np.full(mask.n, np.nan)
    for i in range(mask.n):
        if not mask.valid[i]:
            continue
        m = np.array([-np.inf])
        s = np.zeros(1)
        for block in supplier(i):
            block = np.asarray(block, dtype=np.float64).reshape(1, -1)
            if block.size:
                m, s = lse_update(m, s, block, np.ones_like(block, dtype=bool))
        if s[0] == 0.0:
            raise DegenerateRowError(i)
        lse[i] = m[0] + np.log(s[0])
    return RowStats(lse)


def dense_row_supplier(Z, mask: MaskSpec, block: int | None = None):
    """Build a ``row_logsumexp`` supplier over a materialized logit matrix."""
    Z = np.asarray(Z, dtype=np.float64)
    block = block or mask.n

    def supplier(i):
        for c0 in range(0, mask.n, block):
            c1 = min(c0 + block, mask.n)
            vis = mask.block(i, i + 1, c0, c1)[0]
            yield Z[i, c0:c1][vis]

    return supplier


def write_tensor(path, a: np.ndarray) -> None:
    """Write a 2-D matrix in the RKT1 binary format."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"RKT1 holds 2-D tensors only, got shape {a.shape}")
    prec = precision_of(a)
    header = RKT_MAGIC + struct.pack("<III", 2, a.shape[0], a.shape[1])
    header += struct.pack("<B", _TAG_BY_PRECISION[prec])
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    Path(path).write_bytes(header + np.ascontiguousarray(le).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != RKT_MAGIC:
        raise InputError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 17:
        raise InputError(f"{path}: truncated header")
    rank, rows, cols = struct.unpack("<III", raw[4:16])
    if rank != 2:
        raise InputError(f"{path}: rank {rank} unsupported")
    tag = raw[16]
    if tag not in _PRECISION_BY_TAG:
        raise InputError(f"{path}: unknown precision tag {tag}")
    dtype = PRECISIONS[_PRECISION_BY_TAG[tag]].newbyteorder("<")
    body = raw[17:]
    if len(body) != rows * cols * dtype.itemsize:
        raise InputError(f"{path}: payload size mismatch")
    return np.frombuffer(body, dtype=dtype).reshape(rows, cols).astype(dtype.newbyteorder("="))
