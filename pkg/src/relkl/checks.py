"""Numerical verification: error metrics, finite differences, and the
suites behind the ``verify`` and ``grad-check`` commands.

Random fixtures come from ``numpy.random.Generator(PCG64(SeedSequence(...)))``
so that any other PCG64 implementation can regenerate them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dense import dense_relation_kl
from .kernel import TileConfig, kernel_backward
from .objectives import HeadBatch, LossWeights, self_relation_kl
from .tensor import PRECISIONS, MaskSpec

DENSE_CAP = 4096


def rng_for(*key: int) -> np.random.Generator:
    """Fixture generator for an integer key such as ``(seed, n)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def rel_err(a, ref) -> float:
    """Norm-wise relative error ``||a - ref|| / ||ref||``; absolute when ``ref`` is zero."""
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    denom = np.linalg.norm(ref)
    diff = np.linalg.norm(a - ref)
    return float(diff / denom) if denom > 0 else float(diff)


def magnitude_errors(a, ref):
    """Mean and max absolute deviation, each divided by the mean |ref|.

    Returns ``(None, None)`` for the 0/0 case (identical zero outputs).
    """
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    dev = np.abs(a - ref)
    scale = np.mean(np.abs(ref))
    if scale == 0:
        if not dev.any():
            return None, None
        return float("inf"), float("inf")
    return float(np.mean(dev) / scale), float(np.max(dev) / scale)


def central_difference(f, x: np.ndarray, eps: float = 1e-5, entries=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``entries`` (an iterable of index tuples) only those entries are
    perturbed and a 1-D array in that order is returned.
    """
    x = np.array(x, dtype=np.float64)
    idx = list(np.ndindex(x.shape)) if entries is None else list(entries)
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape) if entries is None else out


@dataclass
class VerifyRow:
    n: int
    forward_rel_err: float | None
    backward_mean_rel_err: float | None
    backward_max_rel_err: float | None


def verify_row(n: int, d: int, precision: str, cfg: TileConfig, seed: int, threads: int = 1,
               identical: bool = False) -> VerifyRow:
    """Kernel at storage ``precision`` against the double dense reference for one length."""
    if n > DENSE_CAP:
        raise ValueError(f"n={n} exceeds the dense reference cap of {DENSE_CAP}")
    rng = rng_for(seed, n, d)
    Xt, Yt = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    Xs, Ys = (Xt, Yt) if identical else (rng.standard_normal((n, d)), rng.standard_normal((n, d)))
    mask = MaskSpec(n, causal=True)
    dtype = PRECISIONS[precision]
    res = kernel_backward(*(a.astype(dtype) for a in (Xt, Yt, Xs, Ys)), mask, cfg, threads=threads)
    ref = dense_relation_kl(Xt, Yt, Xs, Ys, mask)
    if ref.loss == 0:
        fwd = None if res.loss == 0 else float("inf")
    else:
        fwd = abs(res.loss - ref.loss) / abs(ref.loss)
    means, maxes = zip(*(magnitude_errors(g, r) for g, r in ((res.dX, ref.dX), (res.dY, ref.dY))))
    mean = None if all(m is None for m in means) else max(m for m in means if m is not None)
    mx = None if all(m is None for m in maxes) else max(m for m in maxes if m is not None)
    return VerifyRow(n, fwd, mean, mx)


@dataclass
class CheckResult:
    case: str
    check: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)


def _mask_for(kind: str, n: int, rng) -> MaskSpec:
    if kind == "causal":
        return MaskSpec(n, causal=True)
    if kind == "padded":
        return MaskSpec.padded(n, max(1, n - n // 4), causal=True)
    if kind == "holes":
        valid = rng.random(n) > 0.3
        valid[0] = True
        return MaskSpec(n, causal=False, valid=valid)
    raise ValueError(kind)


GRAD_CHECK_CASES = [
    # (n, d, mask kind, (tr, tc))
    (1, 1, "causal", (1, 1)),
    (2, 3, "causal", (1, 1)),
    (5, 4, "padded", (2, 3)),
    (8, 8, "causal", (7, 13)),
    (12, 2, "holes", (4, 4)),
    (16, 8, "padded", (64, 64)),
    (16, 4, "holes", (7, 13)),
    (64, 8, "causal", (16, 16)),
    (257, 16, "padded", (64, 64)),
]


def run_grad_check(seed: int = 0, fault: str | None = None, threads: int = 1,
                   deterministic: bool = True) -> list[CheckResult]:
    """Kernel-vs-reference and finite-difference checks over a fixed case matrix.

    ``fault="sign-flip"`` negates the kernel's dX before comparison and must
    make the suite fail.
    """
    results = []
    for n, d, kind, (tr, tc) in GRAD_CHECK_CASES:
        rng = rng_for(seed, n, d, tr, tc)
        mask = _mask_for(kind, n, rng)
        Xt, Yt, Xs, Ys = (rng.standard_normal((n, d)) for _ in range(4))
        cfg = TileConfig(tr, tc, deterministic=deterministic)
        name = f"n={n};d={d};mask={kind};tile={tr}x{tc}"
        res = kernel_backward(Xt, Yt, Xs, Ys, mask, cfg, threads=threads)
        dX = -res.dX if fault == "sign-flip" else res.dX
        ref = dense_relation_kl(Xt, Yt, Xs, Ys, mask)
        results.append(CheckResult(name, "kernel_loss", rel_err(res.loss, ref.loss), 1e-11))
        results.append(CheckResult(name, "kernel_dX", rel_err(dX, ref.dX), 1e-11))
        results.append(CheckResult(name, "kernel_dY", rel_err(res.dY, ref.dY), 1e-11))
        if n > 16:
            continue
        fd_x = central_difference(lambda x: dense_relation_kl(Xt, Yt, x, Ys, mask).loss, Xs)
        fd_y = central_difference(lambda y: dense_relation_kl(Xt, Yt, Xs, y, mask).loss, Ys)
        results.append(CheckResult(name, "fd_dX", rel_err(dX, fd_x), 1e-6))
        results.append(CheckResult(name, "fd_dY", rel_err(res.dY, fd_y), 1e-6))
        # Self-relation: both factors alias the student tensor.
        T, S = Xt[None, None], Xs[None, None]
        tb = HeadBatch(T, T, T, [mask])
        loss_of = lambda x: self_relation_kl("q", tb, HeadBatch(x[None, None], S, S, [mask]), cfg)[0]
        _, g = self_relation_kl("q", tb, HeadBatch(S, S, S, [mask]), cfg, threads)
        g = -g if fault == "sign-flip" else g
        results.append(CheckResult(name, "fd_self_relation", rel_err(g[0, 0], central_difference(loss_of, Xs)), 1e-6))
    results.extend(toy_projection_check(seed, fault=fault))
    return results


def toy_projection_check(seed: int = 0, n: int = 16, samples: int = 24, fault: str | None = None):
    """Finite differences of a one-layer toy model's relation loss w.r.t. Wq/Wk/Wv."""
    from .toy import ToyModel, relation_objective

    teacher = ToyModel.init(seed, vocab=32, layers=1, H=2, d=4, max_len=n)
    student = teacher.with_rope_scale(4.0)
    rng = rng_for(seed, 7)
    # Move off the V/V optimum (zero gradient) so every projection is tested.
    for name in ("wq", "wk", "wv"):
        W = getattr(student, name)[0]
        W += 0.1 * rng.standard_normal(W.shape)
    tokens = rng.integers(0, teacher.vocab, size=(1, n))
    _, grads, _, _ = relation_objective(teacher, student, tokens, LossWeights())
    out = []
    for name in ("wq", "wk", "wv"):
        W = getattr(student, name)[0]
        flat = rng.choice(W.size, size=min(samples, W.size), replace=False)
        entries = [np.unravel_index(i, W.shape) for i in flat]

        def loss_at(w, name=name):
            getattr(student, name)[0] = w
            return relation_objective(teacher, student, tokens, LossWeights())[0]

        fd = central_difference(loss_at, W, entries=entries)
        getattr(student, name)[0] = W
        g = grads[name][0]
        g = -g if fault == "sign-flip" else g
        analytic = np.array([g[e] for e in entries])
        out.append(CheckResult(f"toy1layer;n={n}", f"fd_{name}", rel_err(analytic, fd), 1e-6))
    return out
