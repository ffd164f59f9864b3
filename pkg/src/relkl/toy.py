"""Desk-scale relation distillation between a native-RoPE teacher and a
RoPE-scaled student.

The model is a tiny attention-only decoder: token embedding, ``layers``
blocks of RMS-normalised multi-head causal attention with a residual
connection, and an unembedding tied to the embedding.  Only the Q/K/V
projections of the student are trained.

Gradients are local: each layer's relation loss updates that layer's own
projections with the layer input held constant.  For a one-layer model this
is the exact gradient; with more layers it ignores the path through earlier
layers' outputs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dense import logit_kl
from .errors import InputError, ParameterError, ShapeError, TrainingDivergenceError
from .kernel import TileConfig
from .objectives import HeadBatch, LossWeights, overall_loss
from .tensor import read_tensor, write_tensor

TRAINABLE = ("wq", "wk", "wv")


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    scale: float = 1.0

    def __post_init__(self):
        if self.head_dim % 2:
            raise ShapeError(f"head_dim must be even, got {self.head_dim}")
        if self.scale < 1:
            raise ParameterError(f"scale must be >= 1, got {self.scale}")
        if self.base <= 0:
            raise ParameterError(f"base must be positive, got {self.base}")

    def frequencies(self) -> np.ndarray:
        t = np.arange(self.head_dim // 2)
        return self.base ** (-2.0 * t / self.head_dim)


def rope_apply(x, cfg: RopeConfig, positions=None, inverse: bool = False) -> np.ndarray:
    """Rotate each feature pair (2t, 2t+1) of row p by ``(p / scale) * base**(-2t/d)``.

    ``inverse`` applies the transpose rotation, which is also the gradient map.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.head_dim:
        raise ShapeError(f"expected (n, {cfg.head_dim}) input, got {x.shape}")
    if positions is None:
        positions = np.arange(x.shape[0])
    angles = (np.asarray(positions, dtype=np.float64)[:, None] / cfg.scale) * cfg.frequencies()[None, :]
    if inverse:
        angles = -angles
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


@dataclass(eq=False)
class ToyModel:
    vocab: int
    layers: int
    H: int
    d: int
    embed: np.ndarray
    wq: list
    wk: list
    wv: list
    wo: list
    rope: RopeConfig
    max_len: int = 128

    @property
    def width(self) -> int:
        return self.H * self.d

    @classmethod
    def init(cls, seed: int = 0, vocab: int = 256, layers: int = 2, H: int = 2, d: int = 16,
             base: float = 10000.0, max_len: int = 128, gain: float = 1.0,
             unused_pairs: int = 0, out_gain: float = 1.0) -> "ToyModel":
        """Random model; ``unused_pairs`` zeroes the Q/K output columns of the
        fastest-rotating feature pairs in every head."""
        rng = np.random.Generator(np.random.PCG64(seed))
        D = H * d
        mats = lambda: [rng.standard_normal((D, D)) * gain / math.sqrt(D) for _ in range(layers)]
        embed = rng.standard_normal((vocab, D))
        wq, wk, wv, wo = mats(), mats(), mats(), mats()
        wo = [w * out_gain for w in wo]
        cols = [h * d + c for h in range(H) for c in range(2 * unused_pairs)]
        for w in wq + wk:
            w[:, cols] = 0.0
        return cls(vocab, layers, H, d, embed, wq, wk, wv, wo, RopeConfig(d, base, 1.0), max_len)

    def with_rope_scale(self, scale: float) -> "ToyModel":
        """Copy with the same weights (fresh arrays) and rescaled positions."""
        return replace(self, wq=[w.copy() for w in self.wq], wk=[w.copy() for w in self.wk],
                       wv=[w.copy() for w in self.wv], rope=replace(self.rope, scale=scale))

    def named_matrices(self) -> dict:
        out = {"embed": self.embed}
        for l in range(self.layers):
            for name in ("wq", "wk", "wv", "wo"):
                out[f"layer{l}.{name}"] = getattr(self, name)[l]
        return out


def _rms_norm(h):
    return h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + 1e-6)


@dataclass
class ForwardOutput:
    logits: np.ndarray            # (B, n, vocab)
    relations: list               # per layer HeadBatch of rotated Q, K and raw V
    layer_inputs: list            # per layer (B, n, width) normalised input


def forward_with_relations(model: ToyModel, tokens) -> ForwardOutput:
    """Causal forward pass exposing each layer's relation operands.

    ``tokens`` is a 1-D sequence or a (B, n) batch.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("tokens must be integers")
    if tokens.size == 0:
        raise InputError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= model.vocab:
        raise InputError(f"token ids must lie in [0, {model.vocab})")
    if tokens.shape[1] > model.max_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds maximum {model.max_len}")
    B, n = tokens.shape
    H, d = model.H, model.d
    causal = np.tril(np.ones((n, n), dtype=bool))
    h = model.embed[tokens]
    relations, inputs = [], []
    for l in range(model.layers):
        a = _rms_norm(h)
        inputs.append(a)
        heads = lambda w: (a @ w).reshape(B, n, H, d).transpose(0, 2, 1, 3)
        q, k, v = heads(model.wq[l]), heads(model.wk[l]), heads(model.wv[l])
        q = np.stack([[rope_apply(q[b, i], model.rope) for i in range(H)] for b in range(B)])
        k = np.stack([[rope_apply(k[b, i], model.rope) for i in range(H)] for b in range(B)])
        relations.append(HeadBatch(q, k, v))
        s = np.where(causal, q @ k.transpose(0, 1, 3, 2) / math.sqrt(d), -np.inf)
        p = np.exp(s - s.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        o = (p @ v).transpose(0, 2, 1, 3).reshape(B, n, H * d)
        h = h + o @ model.wo[l]
    logits = _rms_norm(h) @ model.embed.T
    return ForwardOutput(logits, relations, inputs)


def relation_objective(teacher: ToyModel, student: ToyModel, tokens, w: LossWeights = LossWeights(),
                       cfg: TileConfig = TileConfig(), threads: int = 1):
    """Layer-averaged relation loss and its local gradients w.r.t. Wq/Wk/Wv.

    Returns ``(loss, grads, teacher_out, student_out)`` where ``grads[name][l]``
    matches ``student.<name>[l]``.
    """
    t_out = forward_with_relations(teacher, tokens)
    s_out = forward_with_relations(student, tokens)
    L, H, d = student.layers, student.H, student.d
    total = 0.0
    grads = {name: [] for name in TRAINABLE}
    for l in range(L):
        loss, g = overall_loss(t_out.relations[l], s_out.relations[l], w, cfg, threads)
        total += loss / L
        a = s_out.layer_inputs[l]                       # (B, n, width)
        B = a.shape[0]
        for name, target in zip(TRAINABLE, ("q", "k", "v")):
            gt = g[target] / L                          # (B, H, n, d)
            if target in ("q", "k"):
                gt = np.stack([[rope_apply(gt[b, i], student.rope, inverse=True) for i in range(H)]
                               for b in range(B)])
            d_proj = gt.transpose(0, 2, 1, 3).reshape(B, -1, H * d)
            grads[name].append(np.einsum("bni,bnj->ij", a, d_proj))
    return total, grads, t_out, s_out


@dataclass
class StepMetrics:
    step: int
    relation_kl: float
    logit_kl: float
    lr: float
    grad_norm: float


@dataclass
class LRSchedule:
    """Linear warmup then cosine decay to zero."""

    base_lr: float = 1e-3
    warmup: int = 10
    total: int = 200

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.base_lr * (step + 1) / self.warmup
        span = max(1, self.total - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class DistillState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 5.0


def _final_logit_kl(t_out: ForwardOutput, s_out: ForwardOutput) -> float:
    zt, zs = t_out.logits[:, -1], s_out.logits[:, -1]
    return float(np.mean([logit_kl(zt[b], zs[b], T=1.0) for b in range(zt.shape[0])]))


def distill_step(teacher: ToyModel, student: ToyModel, tokens, w: LossWeights, state: DistillState,
                 schedule: LRSchedule, cfg: TileConfig = TileConfig(), threads: int = 1):
    """One adaptive-moment update of the student's Q/K/V projections.

    Metrics are measured before the update.  Returns the updated student
    (frozen matrices are shared, not copied) and the step's metrics.
    """
    # A previous update that overflowed shows up as non-finite weights.
    if not all(np.all(np.isfinite(W)) for name in TRAINABLE for W in getattr(student, name)):
        raise TrainingDivergenceError(state.step)
    loss, grads, t_out, s_out = relation_objective(teacher, student, tokens, w, cfg, threads)
    flat = [g for name in TRAINABLE for g in grads[name]]
    if not all(np.all(np.isfinite(g)) for g in flat):
        raise TrainingDivergenceError(state.step)
    grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in flat))
    clip = min(1.0, state.clip_norm / grad_norm) if grad_norm > 0 else 1.0
    lr = schedule(state.step)

    t = state.step + 1
    new = {}
    for name in TRAINABLE:
        new[name] = []
        for l, (W, g) in enumerate(zip(getattr(student, name), grads[name])):
            key = f"layer{l}.{name}"
            g = g * clip
            m = state.m.get(key, np.zeros_like(W))
            v = state.v.get(key, np.zeros_like(W))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.m[key], state.v[key] = m, v
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            new[name].append(W - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * W))

    metrics = StepMetrics(state.step, loss, _final_logit_kl(t_out, s_out), lr, grad_norm)
    state.log.append(metrics)
    state.step += 1
    return replace(student, **new), metrics


def markov_chain(vocab: int, seed: int, branching: int = 4) -> np.ndarray:
    """Sparse row-stochastic transition matrix: each token has ``branching`` successors."""
    rng = np.random.Generator(np.random.PCG64(seed))
    P = np.zeros((vocab, vocab))
    for i in range(vocab):
        succ = rng.choice(vocab, size=branching, replace=False)
        P[i, succ] = rng.dirichlet(np.ones(branching))
    return P


def sample_tokens(P: np.ndarray, rng: np.random.Generator, batch: int, n: int) -> np.ndarray:
    vocab = P.shape[0]
    cdf = np.cumsum(P, axis=1)
    out = np.empty((batch, n), dtype=np.int64)
    out[:, 0] = rng.integers(0, vocab, size=batch)
    for i in range(1, n):
        u = rng.random(batch)
        rows = cdf[out[:, i - 1]]
        out[:, i] = np.minimum((rows < u[:, None]).sum(axis=1), vocab - 1)
    return out


@dataclass
class ToyRunConfig:
    seed: int = 0
    steps: int = 200
    scale: float = 4.0
    lr: float = 1e-3
    warmup: int = 10
    batch: int = 1
    n: int = 128
    vocab: int = 256
    layers: int = 2
    H: int = 2
    d: int = 16
    gain: float = 1.0
    base: float = 10000.0
    unused_pairs: int = 0
    # Attention must move the residual stream enough for logit KL to register.
    out_gain: float = 8.0
    weights: LossWeights = LossWeights()
    tile: TileConfig = TileConfig()
    threads: int = 1


def run_distillation(cfg: ToyRunConfig, callback=None):
    """Build teacher and scaled student from one seed and distil for ``cfg.steps`` steps.

    Returns ``(teacher, student, state)``.
    """
    if cfg.steps < 1:
        raise ParameterError("steps must be >= 1")
    teacher = ToyModel.init(cfg.seed, cfg.vocab, cfg.layers, cfg.H, cfg.d, cfg.base, cfg.n, cfg.gain,
                            cfg.unused_pairs, cfg.out_gain)
    student = teacher.with_rope_scale(cfg.scale)
    chain = markov_chain(cfg.vocab, cfg.seed + 1)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 2))
    schedule = LRSchedule(cfg.lr, cfg.warmup, cfg.steps)
    state = DistillState()
    for _ in range(cfg.steps):
        tokens = sample_tokens(chain, rng, cfg.batch, cfg.n)
        student, metrics = distill_step(teacher, student, tokens, cfg.weights, state, schedule,
                                        cfg.tile, cfg.threads)
        if callback is not None:
            callback(metrics)
    return teacher, student, state


def continued_pretraining(model: ToyModel, token_budget_count: int) -> ToyModel:
    """Placeholder for the optional language-modelling stage; returns ``model`` unchanged."""
    return model


def token_budget(stages, G: int) -> int:
    """Total tokens ``sum_s L_s * B_s * A_s * U_s * G`` over ``(L, B, A, U)`` stages."""
    total = 0
    for stage in stages:
        if len(stage) != 4:
            raise InputError(f"stage must be (L, B, A, U), got {stage}")
        if any(x < 0 for x in stage) or G < 0:
            raise ParameterError("token budget factors must be non-negative")
        L, B, A, U = stage
        total += L * B * A * U * G
    return total


def save_checkpoint(model: ToyModel, directory) -> Path:
    """One RKT1 file per named matrix plus ``manifest.json`` mapping names to files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, mat in model.named_matrices().items():
        fname = f"{name}.rkt"
        write_tensor(directory / fname, np.asarray(mat, dtype=np.float64))
        files[name] = fname
    manifest = {
        "files": files,
        "config": {"vocab": model.vocab, "layers": model.layers, "H": model.H, "d": model.d,
                   "base": model.rope.base, "scale": model.rope.scale, "max_len": model.max_len},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory) -> ToyModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg, files = manifest["config"], manifest["files"]
    mats = {name: read_tensor(directory / f) for name, f in files.items()}
    per_layer = lambda kind: [mats[f"layer{l}.{kind}"] for l in range(cfg["layers"])]
    return ToyModel(cfg["vocab"], cfg["layers"], cfg["H"], cfg["d"], mats["embed"],
                    per_layer("wq"), per_layer("wk"), per_layer("wv"), per_layer("wo"),
                    RopeConfig(cfg["d"], cfg["base"], cfg["scale"]), cfg["max_len"])
