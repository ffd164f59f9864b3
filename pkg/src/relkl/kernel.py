"""Linear-memory tiled KL distillation kernel.

Two passes over the implicit n x n logit matrices of teacher and student:

1. ``kernel_lse`` streams over key tiles with a running-max update and keeps
   only the per-row log-sum-exp (O(n) state, stored in double).
2. A fused sweep recomputes each (query tile, key tile) pair of logits,
   reconstructs probabilities as ``exp(Z - LSE)`` and accumulates the loss
   and/or the gradients w.r.t. the student factors.

No buffer of size n x n is ever created; every allocation that outlives one
tile is recorded in an :class:`~relkl.ledger.AllocationLedger`.

Parallelism is over groups of query tiles ("partitions").  Each partition
owns the dX rows of its tiles plus a private dY accumulator; partitions are
merged pairwise in ascending index.  In deterministic mode the partition
count is a property of the :class:`TileConfig` and not of the thread count,
so 1 and k threads produce bit-identical results.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dense import dense_relation_kl
from .errors import ShapeError
from .ledger import AllocationLedger
from .tensor import PRECISIONS, MaskSpec, RowStats, lse_update

F64 = np.float64


@dataclass(frozen=True)
class TileConfig:
    """Tile shape and reduction policy.

    Tile sides larger than the sequence are clipped to ``n`` at call time.
    ``partitions`` is the number of query-tile groups with private dY
    accumulators when ``deterministic`` is set; otherwise one group per thread.
    """

    tr: int = 64
    tc: int = 64
    deterministic: bool = True
    partitions: int = 4

    def __post_init__(self):
        if self.tr < 1 or self.tc < 1:
            raise ShapeError(f"tile sides must be >= 1, got {self.tr}x{self.tc}")
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")


@dataclass
class KernelResult:
    loss: float
    dX: np.ndarray
    dY: np.ndarray
    ledger: AllocationLedger


class _Problem:
    """Validated inputs plus the derived constants every pass needs."""

    def __init__(self, Xt, Yt, Xs, Ys, mask: MaskSpec, cfg: TileConfig, precision=None):
        arrays = [np.asarray(a) for a in (Xt, Yt, Xs, Ys)]
        shape = arrays[0].shape
        if any(a.ndim != 2 or a.shape != shape for a in arrays):
            raise ShapeError(f"inputs must share one n x d shape, got {[a.shape for a in arrays]}")
        n, d = shape
        if n == 0 or d == 0:
            raise ShapeError("empty input")
        if mask.n != n:
            raise ShapeError(f"sequence length {n} does not match mask length {mask.n}")
        if precision is None:
            dtype = np.result_type(*arrays)
            dtype = np.dtype(F64) if dtype not in (np.float32, np.float64) else dtype
        else:
            dtype = PRECISIONS[precision]
        self.Xt, self.Yt, self.Xs, self.Ys = (np.ascontiguousarray(a, dtype=dtype) for a in arrays)
        for a in (self.Xt, self.Yt, self.Xs, self.Ys):
            if not np.all(np.isfinite(a)):
                raise ValueError("kernel inputs contain non-finite values")
        mask.check()
        self.mask = mask
        self.n, self.d = n, d
        self.dtype = dtype
        self.scale = 1.0 / np.sqrt(d)
        self.n_valid = mask.n_valid
        self.tr = min(cfg.tr, n)
        self.tc = min(cfg.tc, n)
        self.q_tiles = [(r0, min(r0 + self.tr, n)) for r0 in range(0, n, self.tr)]
        self.k_tiles = [(c0, min(c0 + self.tc, n)) for c0 in range(0, n, self.tc)]

    def key_tiles_for(self, r1: int):
        # Under causal masking key tiles starting at or after r1 are fully hidden.
        if self.mask.causal:
            return [t for t in self.k_tiles if t[0] < r1]
        return self.k_tiles

    def logits(self, X, Y, r0, r1, c0, c1) -> np.ndarray:
        """One tile of scaled logits, accumulated in double, stored at input precision."""
        z = (X[r0:r1].astype(F64, copy=False) @ Y[c0:c1].astype(F64, copy=False).T) * self.scale
        return z.astype(self.dtype, copy=False)

    def partition(self, cfg: TileConfig, threads: int):
        count = cfg.partitions if cfg.deterministic else threads
        count = max(1, min(count, len(self.q_tiles)))
        bounds = np.linspace(0, len(self.q_tiles), count + 1).round().astype(int)
        return [self.q_tiles[bounds[p]:bounds[p + 1]] for p in range(count)]


def _run(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _pairwise_sum(parts):
    """Sum in a fixed tree order: ((p0 + p1) + (p2 + p3)) + ..."""
    parts = list(parts)
    while len(parts) > 1:
        merged = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def _workers(prob, n_units, threads):
    return max(1, min(threads, n_units))


def _lse(prob: _Problem, X, Y, name, ledger, threads) -> RowStats:
    lse = np.full(prob.n, np.nan)
    ledger.alloc(name, prob.n)
    workers = _workers(prob, len(prob.q_tiles), threads)
    for w in range(workers):
        ledger.alloc(f"{name}.tile_logits[{w}]", prob.tr * prob.tc)
        ledger.alloc(f"{name}.running_max_sum[{w}]", 2 * prob.tr)
        ledger.alloc(f"{name}.tile_inputs[{w}]", (prob.tr + prob.tc) * prob.d)

    def row_block(tile):
        r0, r1 = tile
        m = np.full(r1 - r0, -np.inf)
        s = np.zeros(r1 - r0)
        for c0, c1 in prob.key_tiles_for(r1):
            vis = prob.mask.block(r0, r1, c0, c1)
            if not vis.any():
                continue
            z = prob.logits(X, Y, r0, r1, c0, c1).astype(F64, copy=False)
            m, s = lse_update(m, s, z, vis)
        valid = prob.mask.valid[r0:r1]
        with np.errstate(divide="ignore"):
            lse[r0:r1] = np.where(valid, m + np.log(s), np.nan)

    _run(row_block, prob.q_tiles, threads)
    for w in range(workers):
        ledger.free(f"{name}.tile_logits[{w}]")
        ledger.free(f"{name}.running_max_sum[{w}]")
        ledger.free(f"{name}.tile_inputs[{w}]")
    return RowStats(lse)


def kernel_lse(X, Y, mask: MaskSpec, cfg: TileConfig = TileConfig(), threads: int = 1,
               ledger: AllocationLedger | None = None, precision: str | None = None) -> RowStats:
    """Row-wise log-sum-exp of the masked scaled logits of ``X @ Y.T``, tile by tile."""
    prob = _Problem(X, Y, X, Y, mask, cfg, precision)
    return _lse(prob, prob.Xt, prob.Yt, "lse", ledger or AllocationLedger(), threads)


def _sweep(prob: _Problem, lse_t: RowStats, lse_s: RowStats, cfg, threads, ledger, grads: bool):
    """Fused tiled pass: loss (and gradients if ``grads``) from the stored LSE rows."""
    n, d, dtype, scale = prob.n, prob.d, prob.dtype, prob.scale
    valid = prob.mask.valid
    # Invalid rows carry NaN; they are fully masked, so any finite stand-in works.
    safe_t = np.where(valid, lse_t.lse, 0.0)
    safe_s = np.where(valid, lse_s.lse, 0.0)
    inv_rows = 1.0 / prob.n_valid if prob.n_valid else 0.0

    groups = prob.partition(cfg, threads)
    workers = _workers(prob, len(groups), threads)
    tile = prob.tr * prob.tc
    if grads:
        dX = np.zeros((n, d), dtype=F64)
        ledger.alloc("dX", n * d)
        if len(groups) > 1:
            partials = [np.zeros((n, d), dtype=F64) for _ in groups]
            for p in range(len(groups)):
                ledger.alloc(f"dY.partial[{p}]", n * d)
        else:
            partials = [np.zeros((n, d), dtype=F64)]
            ledger.alloc("dY", n * d)
    for w in range(workers):
        for buf in ("Zs", "Zt", "Rt", "logratio", "mask") + (("Rs", "dZ") if grads else ()):
            ledger.alloc(f"tile.{buf}[{w}]", tile)
        ledger.alloc(f"tile.inputs[{w}]", 2 * (prob.tr + prob.tc) * d)
        if grads:
            ledger.alloc(f"tile.dX_acc[{w}]", prob.tr * d)

    def run_group(p):
        loss = 0.0
        dY_acc = partials[p] if grads else None
        for r0, r1 in groups[p]:
            dX_acc = np.zeros((r1 - r0, d)) if grads else None
            row_t = safe_t[r0:r1, None]
            row_s = safe_s[r0:r1, None]
            for c0, c1 in prob.key_tiles_for(r1):
                vis = prob.mask.block(r0, r1, c0, c1)
                if not vis.any():
                    continue
                zs = prob.logits(prob.Xs, prob.Ys, r0, r1, c0, c1).astype(F64, copy=False)
                zt = prob.logits(prob.Xt, prob.Yt, r0, r1, c0, c1).astype(F64, copy=False)
                log_rs = zs - row_s
                log_rt = zt - row_t
                rt = np.where(vis, np.exp(np.where(vis, log_rt, -np.inf)), 0.0)
                rt = rt.astype(dtype, copy=False).astype(F64, copy=False)
                loss += float(np.where(vis, rt * (log_rt - log_rs), 0.0).sum())
                if grads:
                    rs = np.exp(np.where(vis, log_rs, -np.inf)).astype(dtype, copy=False)
                    dz = ((rs.astype(F64, copy=False) - rt) * inv_rows).astype(dtype, copy=False)
                    dz = dz.astype(F64, copy=False)
                    dX_acc += scale * (dz @ prob.Ys[c0:c1].astype(F64, copy=False))
                    dY_acc[c0:c1] += scale * (dz.T @ prob.Xs[r0:r1].astype(F64, copy=False))
            if grads:
                dX[r0:r1] = dX_acc
        return loss

    losses = _run(run_group, list(range(len(groups))), threads)
    for w in range(workers):
        for buf in ("Zs", "Zt", "Rt", "logratio", "mask") + (("Rs", "dZ") if grads else ()):
            ledger.free(f"tile.{buf}[{w}]")
        ledger.free(f"tile.inputs[{w}]")
        if grads:
            ledger.free(f"tile.dX_acc[{w}]")

    loss = _pairwise_sum(losses) * inv_rows
    if not grads:
        return loss, None, None
    if len(groups) > 1:
        ledger.alloc("dY", n * d)
        dY = _pairwise_sum(partials)
        for p in range(len(groups)):
            ledger.free(f"dY.partial[{p}]")
    else:
        dY = partials[0]
    return loss, dX.astype(dtype, copy=False), dY.astype(dtype, copy=False)


def kernel_forward(Xt, Yt, Xs, Ys, mask: MaskSpec, cfg: TileConfig = TileConfig(), threads: int = 1,
                   precision: str | None = None):
    """Loss-only pass.  Returns ``(loss, ledger)``."""
    ledger = AllocationLedger()
    prob = _Problem(Xt, Yt, Xs, Ys, mask, cfg, precision)
    lse_s = _lse(prob, prob.Xs, prob.Ys, "lse_s", ledger, threads)
    lse_t = _lse(prob, prob.Xt, prob.Yt, "lse_t", ledger, threads)
    loss, _, _ = _sweep(prob, lse_t, lse_s, cfg, threads, ledger, grads=False)
    return loss, ledger


def kernel_backward(Xt, Yt, Xs, Ys, mask: MaskSpec, cfg: TileConfig = TileConfig(), threads: int = 1,
                    precision: str | None = None) -> KernelResult:
    """Loss plus gradients w.r.t. the student factors ``Xs`` and ``Ys``.

    The teacher factors receive no gradient.  Outputs are stored at the input
    precision; loss is always a Python float.
    """
    ledger = AllocationLedger()
    prob = _Problem(Xt, Yt, Xs, Ys, mask, cfg, precision)
    lse_s = _lse(prob, prob.Xs, prob.Ys, "lse_s", ledger, threads)
    lse_t = _lse(prob, prob.Xt, prob.Yt, "lse_t", ledger, threads)
    loss, dX, dY = _sweep(prob, lse_t, lse_s, cfg, threads, ledger, grads=True)
    return KernelResult(loss, dX, dY, ledger)


@dataclass
class MemoryRow:
    n: int
    kernel_peak: int
    dense_peak: int | None
    kernel_ledger: AllocationLedger


def measure_memory(n_values, d: int, cfg: TileConfig = TileConfig(), dense_cap: int = 4096,
                   threads: int = 1, seed: int = 0) -> list[MemoryRow]:
    """Peak auxiliary elements of the kernel and of the dense reference per length.

    Both are obtained by actually running the code on random inputs; the dense
    reference is skipped (``dense_peak=None``) above ``dense_cap``.
    """
    n_values = list(n_values)
    if any(n < 1 for n in n_values):
        raise ShapeError(f"sequence lengths must be >= 1, got {n_values}")
    if n_values != sorted(n_values):
        raise ValueError("n_values must be ascending")
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    for n in n_values:
        Xt, Yt, Xs, Ys = (rng.standard_normal((n, d)) for _ in range(4))
        mask = MaskSpec(n, causal=True)
        res = kernel_backward(Xt, Yt, Xs, Ys, mask, cfg, threads=threads)
        dense_peak = None
        if n <= dense_cap:
            dense_ledger = AllocationLedger()
            dense_relation_kl(Xt, Yt, Xs, Ys, mask, ledger=dense_ledger)
            dense_peak = dense_ledger.peak_aux_elements
        rows.append(MemoryRow(n, res.ledger.peak_aux_elements, dense_peak, res.ledger))
    return rows


def fit_linear(ns, peaks):
    """Least-squares ``peak = slope * n + intercept``; returns ``(slope, intercept, r2)``."""
    fit = stats.linregress(np.asarray(ns, dtype=F64), np.asarray(peaks, dtype=F64))
    return fit.slope, fit.intercept, fit.rvalue ** 2
