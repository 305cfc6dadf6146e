"""Time the compiled and numpy MMD kernels, and one local training step with each.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

The second table runs the same FRAug local steps twice, swapping only the
kernel backend, so it shows how much of a step the kernel accounts for.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from fraug import kernels
from fraug.config import ExperimentConfig, replace_path
from fraug.federation import run_round, setup
from fraug.objectives import DEFAULT_MULTIPLIERS, median_sqdist


def time_call(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernel(repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for n, m, d in ((1, 1, 64), (5, 32, 64), (32, 32, 64), (128, 128, 64), (256, 256, 64)):
        x, y = rng.normal(size=(n, d)), rng.normal(0.3, 1.0, size=(m, d))
        coefs = 0.5 / (median_sqdist(np.vstack([x, y])) * np.asarray(DEFAULT_MULTIPLIERS))
        row = {"n": n, "m": m, "d": d}
        for name, impl in kernels.available_backends().items():
            row[name] = time_call(lambda impl=impl: impl(x, y, coefs, True), repeat)
        rows.append(row)
    return rows


def bench_step(rounds: int) -> dict:
    cfg = replace_path(ExperimentConfig(), strategy__name="fraug", train__rounds=rounds)
    out = {}
    saved = kernels._impl
    try:
        for name, impl in kernels.available_backends().items():
            kernels._impl = impl
            fed = setup(cfg, 0)
            t0 = time.perf_counter()
            for r in range(1, rounds + 1):
                run_round(fed, r)
            out[name] = (time.perf_counter() - t0) / (rounds * cfg.train.local_steps * len(fed.clients))
    finally:
        kernels._impl = saved
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--json")
    args = p.parse_args(argv)

    backends = list(kernels.available_backends())
    print(f"default backend: {kernels.BACKEND}")
    kern = bench_kernel(args.repeat)
    print(f"{'n':>5} {'m':>5} " + " ".join(f"{b + ' (us)':>15}" for b in backends) + ("  speedup" if len(backends) > 1 else ""))
    for r in kern:
        cells = " ".join(f"{1e6 * r[b]:15.1f}" for b in backends)
        extra = f"  {r['python'] / r['compiled']:7.2f}x" if "compiled" in r else ""
        print(f"{r['n']:5d} {r['m']:5d} {cells}{extra}")
    step = bench_step(args.rounds)
    print("FRAug local step (ms): " + ", ".join(f"{b} {1e3 * t:.2f}" for b, t in step.items()))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"kernel": kern, "step": step}, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
