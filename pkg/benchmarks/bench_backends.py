"""Timings: compiled core vs numpy fallback on the shapes training hits.

Run:  python3 benchmarks/bench_backends.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from lexsel._backend import numpy_ops

try:
    from lexsel._backend import _core as core
except ImportError:
    core = None


def bench(fn, args, repeats):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--rows", type=int, default=30000,
                    help="batch rows (training stacks 3 passes of 10k)")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n, h = args.rows, 200
    cases = []
    for dt in (np.float32, np.float64):
        x = rng.standard_normal((n, h)).astype(dt)
        w = rng.standard_normal((h, h)).astype(dt)
        b = rng.standard_normal(h).astype(dt)
        gy = rng.standard_normal((n, h)).astype(dt)
        y = numpy_ops.affine(x, w, b, 1)
        p = rng.standard_normal(h * h).astype(dt)
        g = rng.standard_normal(h * h).astype(dt)
        m = np.zeros(h * h, dt)
        v = np.zeros(h * h, dt)
        logits = rng.standard_normal((n, 2)).astype(dt)
        cases += [
            (f"affine+relu {n}x{h}@{h}x{h} {dt.__name__}",
             "affine", (x, w, b, 1)),
            (f"affine_backward {dt.__name__}",
             "affine_backward", (gy, x, w)),
            (f"act_backward relu {dt.__name__}",
             "act_backward", (gy, y, 1)),
            (f"sigmoid {n}x{h} {dt.__name__}", "sigmoid", (x,)),
            (f"softmax_rows {n}x2 {dt.__name__}", "softmax_rows", (logits,)),
            (f"logsumexp_rows {n}x2 {dt.__name__}",
             "logsumexp_rows", (logits,)),
            (f"adam_step {h * h} params {dt.__name__}",
             "adam_step", (p, g, m, v, 1, 1e-3, 0.9, 0.999, 1e-8, 0.0)),
        ]

    print(f"{'kernel':44s} {'numpy ms':>10s} {'core ms':>10s} {'speedup':>8s}")
    for label, name, a in cases:
        t_np = bench(getattr(numpy_ops, name), a, args.repeats)
        if core is None:
            print(f"{label:44s} {t_np:10.3f} {'n/a':>10s} {'n/a':>8s}")
            continue
        t_core = bench(getattr(core, name), a, args.repeats)
        print(f"{label:44s} {t_np:10.3f} {t_core:10.3f} {t_np / t_core:8.2f}")


if __name__ == "__main__":
    main()
