"""Peak auxiliary memory of the kernel and of the dense reference.

Both numbers come from an allocation ledger that every buffer is
registered with, so the counts are exact and machine-independent.
"""
from relkl import TileConfig, fit_linear, measure_memory

rows = measure_memory([512, 1024, 2048, 4096], d=64, cfg=TileConfig(64, 64), dense_cap=2048)
print(f"{'n':>6} {'kernel':>10} {'dense':>12}")
for r in rows:
    print(f"{r.n:>6} {r.kernel_peak:>10} {r.dense_peak if r.dense_peak else 'skipped':>12}")

slope, intercept, r2 = fit_linear([r.n for r in rows], [r.kernel_peak for r in rows])
print(f"\nkernel peak = {slope:.1f} n + {intercept:.0f}  (R^2 {r2:.5f})")

print("\nbuffers live at the kernel peak, n=4096:")
for name, elements in rows[-1].kernel_ledger.live_at_peak:
    print(f"  {name:<22} {elements:>9}")
