"""Quadratic-memory reference objectives and gradients.

Everything here materializes full n x n matrices and always computes in
double precision, so it can serve as ground truth for the tiled kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .errors import ParameterError, ShapeError
from .ledger import NullLedger
from .tensor import MaskSpec, masked_row_softmax, matmul_scaled

# Keeps log(r_t / r_s) finite if r_s underflowed; the gradient never uses it.
PROB_FLOOR = 1e-30


@dataclass
class DenseKLReport:
    loss: float
    dZs: np.ndarray
    dX: np.ndarray
    dY: np.ndarray


def _check_inputs(tensors, mask):
    shape = np.shape(tensors[0])
    for t in tensors:
        if np.ndim(t) != 2 or np.shape(t) != shape:
            raise ShapeError(f"inputs must share one n x d shape, got {[np.shape(t) for t in tensors]}")
    if shape[0] != mask.n:
        raise ShapeError(f"sequence length {shape[0]} does not match mask length {mask.n}")
    if shape[0] == 0 or shape[1] == 0:
        raise ShapeError("empty input")


def _masked_lse(Z, vis):
    out = np.zeros(Z.shape[0])
    rows = vis.any(axis=1)
    out[rows] = logsumexp(np.where(vis[rows], Z[rows], -np.inf), axis=1)
    return out


def dense_relation_kl(Xt, Yt, Xs, Ys, mask: MaskSpec, ledger=None) -> DenseKLReport:
    """Mean forward KL between teacher and student row distributions, with gradients.

    The mean runs over valid query rows.  ``ledger`` (an
    :class:`~relkl.kernel.AllocationLedger`) optionally receives the element
    counts of the buffers this reference allocates.
    """
    _check_inputs((Xt, Yt, Xs, Ys), mask)
    Xs = np.asarray(Xs, dtype=np.float64)
    Ys = np.asarray(Ys, dtype=np.float64)
    n, d = Xs.shape
    scale = 1.0 / np.sqrt(d)
    n_valid = mask.n_valid

    track = ledger if ledger is not None else NullLedger()
    Zt = matmul_scaled(Xt, Yt, scale)
    Zs = matmul_scaled(Xs, Ys, scale)
    track.alloc("Zt", n * n)
    track.alloc("Zs", n * n)
    Rt = masked_row_softmax(Zt, mask)
    Rs = masked_row_softmax(Zs, mask)
    track.alloc("Rt", n * n)
    track.alloc("Rs", n * n)

    # Log-probabilities straight from the logits; log(softmax) would lose digits.
    vis = mask.dense()
    track.alloc("mask", n * n)
    log_rt = Zt - _masked_lse(Zt, vis)[:, None]
    log_rs = np.maximum(Zs - _masked_lse(Zs, vis)[:, None], np.log(PROB_FLOOR))
    track.alloc("log_rt", n * n)
    track.alloc("log_rs", n * n)
    pos = Rt > 0
    terms = np.zeros_like(Rt)
    track.alloc("kl_terms", n * n)
    terms[pos] = Rt[pos] * (log_rt[pos] - log_rs[pos])
    del log_rt, log_rs, vis
    track.free("log_rt")
    track.free("log_rs")
    track.free("mask")
    loss = float(terms.sum(axis=1).sum()) / n_valid if n_valid else 0.0
    del terms, pos, Zt, Zs
    track.free("kl_terms")
    track.free("Zt")
    track.free("Zs")

    dZs = Rs - Rt
    track.alloc("dZs", n * n)
    if n_valid:
        dZs /= n_valid
    dX = scale * (dZs @ Ys)
    dY = scale * (dZs.T @ Xs)
    track.alloc("dX", n * d)
    track.alloc("dY", n * d)
    return DenseKLReport(loss, dZs, dX, dY)


def dense_attention_kl(Qt, Kt, Qs, Ks, mask: MaskSpec, ledger=None) -> DenseKLReport:
    """Attention-map distillation: the relation KL with (X, Y) = (Q, K)."""
    return dense_relation_kl(Qt, Kt, Qs, Ks, mask, ledger=ledger)


def logit_kl(zt, zs, T: float = 1.0) -> float:
    """KL(softmax(zt / T) || softmax(zs / T))."""
    if T <= 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    zt = np.asarray(zt, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    if zt.shape != zs.shape or zt.ndim != 1 or zt.size == 0:
        raise ShapeError(f"logit vectors must be 1-D of equal non-zero length, got {zt.shape}, {zs.shape}")
    log_pt = log_softmax(zt / T)
    log_ps = log_softmax(zs / T)
    return float(np.sum(softmax(zt / T) * (log_pt - log_ps)))


def prop1_gradients(r_t: float, r_s: float) -> tuple[float, float]:
    """Logit gradients of the per-entry MSE and forward-KL losses.

    Returns ``(dMSE/dz_s, dKL/dz_s) = ((r_s - r_t) r_s (1 - r_s), r_s - r_t)``.
    As ``r_s -> 0`` the first vanishes while the second tends to ``-r_t``.
    """
    for name, v in (("r_t", r_t), ("r_s", r_s)):
        if not 0.0 < v < 1.0:
            raise ParameterError(f"{name} must lie strictly inside (0, 1), got {v}")
    return (r_s - r_t) * r_s * (1.0 - r_s), r_s - r_t
