import math

import numpy as np
import pytest

from relkl.tensor import MaskSpec


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def loop_matmul_scaled(X, Y, scale):
    """Triple-loop reference for scale * X @ Y.T."""
    n, d = len(X), len(X[0])
    m = len(Y)
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = scale * math.fsum(float(X[i][k]) * float(Y[j][k]) for k in range(d))
    return out


def elementwise_kl(Xt, Yt, Xs, Ys, mask: MaskSpec):
    """Per-element forward-KL reference built from Python floats."""
    n, d = Xt.shape
    scale = 1.0 / math.sqrt(d)
    total = 0.0
    for i in range(n):
        if not mask.valid[i]:
            continue
        cols = [j for j in range(n) if mask.visible(i, j)]
        zt = [scale * math.fsum(Xt[i, k] * Yt[j, k] for k in range(d)) for j in cols]
        zs = [scale * math.fsum(Xs[i, k] * Ys[j, k] for k in range(d)) for j in cols]
        mt, ms = max(zt), max(zs)
        lt = mt + math.log(math.fsum(math.exp(z - mt) for z in zt))
        ls = ms + math.log(math.fsum(math.exp(z - ms) for z in zs))
        total += math.fsum(math.exp(a - lt) * ((a - lt) - (b - ls)) for a, b in zip(zt, zs))
    return total / mask.n_valid


def random_mask(kind, n, rng):
    if kind == "causal":
        return MaskSpec(n, causal=True)
    if kind == "padded":
        return MaskSpec.padded(n, max(1, (3 * n) // 4), causal=True)
    if kind == "holes":
        valid = rng.random(n) > 0.3
        valid[0] = True
        return MaskSpec(n, causal=bool(rng.random() < 0.5), valid=valid)
    if kind == "full":
        return MaskSpec(n, causal=False)
    raise ValueError(kind)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
