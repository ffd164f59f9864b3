"""Relation distributions and the forward KL between them.

A relation distribution is the masked row-softmax of X @ Y.T / sqrt(d).
This script builds one by hand, compares a teacher and a student, and
shows why KL keeps pushing on entries the student has nearly zeroed out
while a squared-error loss gives up on them.
"""
import numpy as np

from relkl import MaskSpec, dense_relation_kl, logit_kl, masked_row_softmax, matmul_scaled, prop1_gradients

rng = np.random.Generator(np.random.PCG64(0))
n, d = 6, 4
Xt, Yt = rng.standard_normal((n, d)), rng.standard_normal((n, d))
Xs, Ys = Xt + 0.3 * rng.standard_normal((n, d)), Yt.copy()

mask = MaskSpec(n, causal=True)
Rt = masked_row_softmax(matmul_scaled(Xt, Yt), mask)
print("teacher relation rows (causal):")
print(np.round(Rt, 3))

rep = dense_relation_kl(Xt, Yt, Xs, Ys, mask)
print(f"\nmean forward KL over {mask.n_valid} rows: {rep.loss:.6f}")
print("row sums of dZ (always zero):", np.round(rep.dZs.sum(axis=1), 15))

# Padding: trailing positions are ignored as queries and as keys.
padded = MaskSpec.padded(n, 4)
print(f"padded to 4 real tokens: KL {dense_relation_kl(Xt, Yt, Xs, Ys, padded).loss:.6f}")

print("\nlogit KL of [1, 0] vs [0, 1]:")
for T in (1.0, 2.0, 4.0):
    print(f"  T={T}: {logit_kl([1, 0], [0, 1], T):.6f}")

print("\nteacher prob 0.9, student prob shrinking:")
print(f"{'r_s':>8} {'dMSE/dz':>14} {'dKL/dz':>14}")
for k in range(1, 9):
    g_mse, g_kl = prop1_gradients(0.9, 10.0 ** -k)
    print(f"{10.0 ** -k:8.0e} {g_mse:14.3e} {g_kl:14.9f}")
