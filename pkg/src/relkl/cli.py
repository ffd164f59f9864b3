"""Command-line entry point: ``relkl <command> [options]``.

Exit codes: 0 success, 1 verification failure or divergence, 2 usage or
parse error, 3 degenerate input.
"""
from __future__ import annotations

import argparse
import csv
import sys
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import checks
from .errors import DegenerateRowError, InputError, ParameterError, ShapeError, TrainingDivergenceError
from .kernel import TileConfig, fit_linear, measure_memory
from .objectives import LossWeights
from .toy import ToyRunConfig, run_distillation, save_checkpoint, token_budget

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DEGENERATE = 0, 1, 2, 3


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "double"
    tile: tuple = (64, 64)
    threads: int = 1
    deterministic: bool = False
    out: str | None = None

    def tile_config(self) -> TileConfig:
        return TileConfig(*self.tile, deterministic=self.deterministic)


def fmt(x) -> str:
    if x is None:
        return "exact"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _tile(text: str) -> tuple:
    try:
        tr, tc = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tile must look like 64x64, got {text!r}")
    return tr, tc


def _weights(text: str) -> LossWeights:
    try:
        return LossWeights(*(float(v) for v in text.split(",")))
    except (TypeError, ValueError) as exc:
        raise argparse.ArgumentTypeError(f"weights must be three non-negative numbers: {exc}")


@contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def cmd_verify(cfg: RunConfig, n_list, d: int = 64, identical: bool = False) -> int:
    too_big = [n for n in n_list if n > checks.DENSE_CAP]
    if too_big:
        print(f"refusing n={too_big}: dense reference is capped at {checks.DENSE_CAP}", file=sys.stderr)
        return EXIT_USAGE
    with _output(cfg.out) as fh:
        w = _writer(fh)
        w.writerow(["n", "forward_rel_err", "backward_mean_rel_err", "backward_max_rel_err"])
        for n in n_list:
            row = checks.verify_row(n, d, cfg.precision, cfg.tile_config(), cfg.seed, cfg.threads, identical)
            w.writerow([n, fmt(row.forward_rel_err), fmt(row.backward_mean_rel_err), fmt(row.backward_max_rel_err)])
    return EXIT_OK


def cmd_bench_memory(cfg: RunConfig, n_list, d: int = 64, dense_cap: int = checks.DENSE_CAP) -> int:
    tile = cfg.tile_config()
    rows = measure_memory(n_list, d, tile, dense_cap=dense_cap, threads=cfg.threads, seed=cfg.seed)
    with _output(cfg.out) as fh:
        w = _writer(fh)
        w.writerow(["n", "d", "tr", "tc", "buffer", "elements"])
        for r in rows:
            tr, tc = min(tile.tr, r.n), min(tile.tc, r.n)
            for name, elements in r.kernel_ledger.live_at_peak:
                w.writerow([r.n, d, tr, tc, name, elements])
            w.writerow([r.n, d, tr, tc, "kernel.peak", r.kernel_peak])
            w.writerow([r.n, d, tr, tc, "dense.peak", "skipped" if r.dense_peak is None else r.dense_peak])
    slope, intercept, r2 = fit_linear([r.n for r in rows], [r.kernel_peak for r in rows])
    print(f"kernel peak ~= {slope:.6g} * n + {intercept:.6g}  (R^2 = {r2:.6f})", file=sys.stderr)
    for a, b in zip(rows, rows[1:]):
        line = f"n {a.n} -> {b.n}: kernel x{b.kernel_peak / a.kernel_peak:.3f}"
        if a.dense_peak and b.dense_peak:
            line += f", dense x{b.dense_peak / a.dense_peak:.3f}"
        print(line, file=sys.stderr)
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig, fault: str | None = None) -> int:
    if cfg.precision != "double":
        print("grad-check runs in double precision only", file=sys.stderr)
        return EXIT_USAGE
    results = checks.run_grad_check(cfg.seed, fault=fault, threads=cfg.threads, deterministic=cfg.deterministic)
    failures = [r for r in results if not r.passed]
    with _output(cfg.out) as fh:
        w = _writer(fh)
        w.writerow(["case", "check", "rel_err", "tol", "status"])
        for r in results:
            w.writerow([r.case, r.check, fmt(r.error), fmt(r.tol), "pass" if r.passed else "FAIL"])
    print(f"{len(results) - len(failures)}/{len(results)} checks passed, {len(failures)} failures", file=sys.stderr)
    return EXIT_FAIL if failures else EXIT_OK


def cmd_distill_toy(cfg: RunConfig, steps: int, scale: float, weights: LossWeights, lr: float = 1e-3,
                    checkpoint: str | None = None) -> int:
    if steps < 1:
        print("steps must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    run = ToyRunConfig(seed=cfg.seed, steps=steps, scale=scale, lr=lr, weights=weights,
                       tile=cfg.tile_config(), threads=cfg.threads)
    with _output(cfg.out) as fh:
        w = _writer(fh)
        w.writerow(["step", "relation_kl", "logit_kl", "lr", "grad_norm"])
        emit = lambda m: w.writerow([m.step, fmt(m.relation_kl), fmt(m.logit_kl), fmt(m.lr), fmt(m.grad_norm)])
        _, student, state = run_distillation(run, callback=emit)
    if checkpoint:
        save_checkpoint(student, checkpoint)
    first, last = state.log[0], state.log[-1]
    print(f"relation_kl {first.relation_kl:.6g} -> {last.relation_kl:.6g}; "
          f"logit_kl {first.logit_kl:.6g} -> {last.logit_kl:.6g}", file=sys.stderr)
    return EXIT_OK


def parse_stages(spec: str) -> list[tuple[int, int, int, int]]:
    """Parse ``"L,B,A,U;L,B,A,U"``; an empty string means no stages."""
    stages = []
    for k, chunk in enumerate(s for s in spec.split(";") if s.strip()):
        fields = chunk.split(",")
        if len(fields) != 4:
            raise InputError(f"stage {k}: expected 4 fields L,B,A,U, got {chunk!r}")
        values = []
        for name, field in zip("LBAU", fields):
            try:
                values.append(int(field))
            except ValueError:
                raise InputError(f"stage {k}: field {name}={field!r} is not an integer")
        stages.append(tuple(values))
    return stages


def cmd_tokens(cfg: RunConfig, spec: str, G: int) -> int:
    stages = parse_stages(spec)
    total = token_budget(stages, G)
    with _output(cfg.out) as fh:
        w = _writer(fh)
        w.writerow(["stage", "L", "B", "A", "U", "G", "tokens"])
        for k, st in enumerate(stages):
            w.writerow([k, *st, G, token_budget([st], G)])
        w.writerow(["total", "", "", "", "", G, total])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", choices=["single", "double"], default="double")
    common.add_argument("--tile", type=_tile, default=(64, 64), help="query x key tile, e.g. 64x64")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--deterministic", action="store_true",
                        help="fixed reduction partitions, identical results for any thread count")
    common.add_argument("--out", default=None, help="CSV output path (default: stdout)")

    p = argparse.ArgumentParser(prog="relkl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="kernel vs dense reference error report")
    v.add_argument("--n", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    v.add_argument("--d", type=int, default=64)
    v.add_argument("--identical", action="store_true", help="teacher == student fixture")

    b = sub.add_parser("bench-memory", parents=[common], help="allocation ledger vs sequence length")
    b.add_argument("--n", type=_int_list, default=[1024, 2048, 4096, 8192, 16384])
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--dense-cap", type=int, default=checks.DENSE_CAP)

    g = sub.add_parser("grad-check", parents=[common], help="reference and finite-difference suites")
    g.add_argument("--inject-fault", choices=["sign-flip"], default=None)

    t = sub.add_parser("distill-toy", parents=[common], help="toy relation distillation run")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--scale", type=float, default=4.0)
    t.add_argument("--weights", type=_weights, default=LossWeights(), help="lambda_q,lambda_k,lambda_v")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--checkpoint", default=None, help="directory for the student checkpoint")

    k = sub.add_parser("tokens", parents=[common], help="token budget of a staged run")
    k.add_argument("--stages", default="", help='semicolon-separated "L,B,A,U" quadruples')
    k.add_argument("--gpus", "-G", type=int, default=1)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    cfg = RunConfig(args.seed, args.precision, args.tile, args.threads, args.deterministic, args.out)
    try:
        if args.command == "verify":
            return cmd_verify(cfg, args.n, args.d, args.identical)
        if args.command == "bench-memory":
            return cmd_bench_memory(cfg, args.n, args.d, args.dense_cap)
        if args.command == "grad-check":
            return cmd_grad_check(cfg, args.inject_fault)
        if args.command == "distill-toy":
            return cmd_distill_toy(cfg, args.steps, args.scale, args.weights, args.lr, args.checkpoint)
        if args.command == "tokens":
            return cmd_tokens(cfg, args.stages, args.gpus)
    except DegenerateRowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (InputError, ParameterError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
