"""Q/Q, K/K and V/V self-relation objectives over batches of heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .kernel import TileConfig, kernel_backward
from .tensor import MaskSpec

TARGETS = ("q", "k", "v")


@dataclass(eq=False)
class HeadBatch:
    """Per-head projections of one layer, each of shape (B, H, n, d).

    ``masks[b]`` is shared by every head of batch element ``b``; it defaults
    to a causal mask with no padding.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    masks: list = field(default=None)

    def __post_init__(self):
        self.q, self.k, self.v = (np.asarray(a) for a in (self.q, self.k, self.v))
        if self.q.ndim != 4 or not (self.q.shape == self.k.shape == self.v.shape):
            raise ShapeError(f"q, k, v must share a (B, H, n, d) shape, got "
                             f"{self.q.shape}, {self.k.shape}, {self.v.shape}")
        B, _, n, _ = self.q.shape
        if self.masks is None:
            self.masks = [MaskSpec(n, causal=True) for _ in range(B)]
        if len(self.masks) != B or any(m.n != n for m in self.masks):
            raise ShapeError("need one mask of length n per batch element")

    @property
    def shape(self):
        return self.q.shape

    def select(self, target: str) -> np.ndarray:
        if target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
        return getattr(self, target)


@dataclass(frozen=True)
class LossWeights:
    lambda_q: float = 1.0
    lambda_k: float = 1.0
    lambda_v: float = 1.0

    def __post_init__(self):
        for name in ("lambda_q", "lambda_k", "lambda_v"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative, got {getattr(self, name)}")

    def items(self):
        return zip(TARGETS, (self.lambda_q, self.lambda_k, self.lambda_v))


def self_relation_kl(target: str, teacher: HeadBatch, student: HeadBatch,
                     cfg: TileConfig = TileConfig(), threads: int = 1):
    """Self-relation KL of one projection, averaged over batch and heads.

    Returns ``(loss, grad)`` with ``grad`` shaped like the selected student
    tensor.  X and Y alias the same student tensor, so each slice gradient is
    ``dX + dY``.
    """
    if teacher.shape != student.shape:
        raise ShapeError(f"teacher {teacher.shape} and student {student.shape} differ")
    T = teacher.select(target)
    S = student.select(target)
    B, H = S.shape[:2]
    grad = np.zeros(S.shape, dtype=np.result_type(S.dtype, np.float32))
    losses = []
    for b in range(B):
        for h in range(H):
            res = kernel_backward(T[b, h], T[b, h], S[b, h], S[b, h], student.masks[b], cfg, threads=threads)
            losses.append(res.loss)
            grad[b, h] = (res.dX + res.dY) / (B * H)
    return float(np.sum(losses)) / (B * H), grad


def overall_loss(teacher: HeadBatch, student: HeadBatch, w: LossWeights = LossWeights(),
                 cfg: TileConfig = TileConfig(), threads: int = 1):
    """Weighted sum of the three self-relation losses.

    Returns ``(loss, grads)`` where ``grads`` maps ``"q"``/``"k"``/``"v"`` to
    arrays shaped like the student tensors.  Targets with zero weight are not
    evaluated and get zero gradients.
    """
    if teacher.shape != student.shape:
        raise ShapeError(f"teacher {teacher.shape} and student {student.shape} differ")
    total = 0.0
    grads = {}
    for target, lam in w.items():
        if lam == 0:
            grads[target] = np.zeros(student.select(target).shape)
            continue
        loss, g = self_relation_kl(target, teacher, student, cfg, threads)
        total += lam * loss
        grads[target] = lam * g
    return total, grads
