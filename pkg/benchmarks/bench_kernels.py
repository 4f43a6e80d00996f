"""Compare the compiled and numpy expression kernels.

    python benchmarks/bench_kernels.py --repeat 5
"""
import argparse
import time

import numpy as np

from quosr import kernels
from quosr.expr import compile_expr, generate_family, GeneratorConfig, skeletonize, exponent_slots


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--exprs", type=int, default=50)
    ap.add_argument("--points", type=int, default=30)
    ap.add_argument("--eval-points", type=int, default=10000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = kernels.backends()
    fam = generate_family(args.seed, args.exprs, 1, GeneratorConfig(max_depth=4))
    progs = [compile_expr(e, 1) for e in fam]
    rng = np.random.default_rng(args.seed)
    X_eval = rng.uniform(-3, 3, size=(args.eval_points, 1))
    X_fit = rng.uniform(-3, 3, size=(args.points, 1))
    fits = []
    for p in progs:
        y, ok = kernels.eval_program(p, X_fit)
        if ok.all() and len(p.consts):
            starts = np.vstack([p.consts + rng.normal(0, 0.5, len(p.consts)) for _ in range(8)])
            slots = exponent_slots(skeletonize(p.template))
            starts[:, slots] = p.consts[slots]
            fits.append((p, starts, y, np.array([0.0 if s else 1.0 for s in slots])))

    print(f"{len(progs)} expressions, {len(fits)} fittable; best of {args.repeat}")
    print(f"{'backend':8s} {'eval big':>10s} {'eval 30pt':>10s} {'fit':>10s}   (seconds)")
    results = {}
    for name, impl in sorted(backends.items()):
        t_eval = _time(lambda: [kernels.eval_program(p, X_eval, impl) for p in progs], args.repeat)
        t_small = _time(lambda: [kernels.eval_program(p, X_fit, impl)
                                 for _ in range(20) for p in progs], args.repeat)
        t_fit = _time(lambda: [kernels.fit_lm(p, s, X_fit, y, free=f, impl=impl)
                               for p, s, y, f in fits], args.repeat)
        results[name] = (t_eval, t_small, t_fit)
        print(f"{name:8s} {t_eval:10.4f} {t_small:10.4f} {t_fit:10.4f}")
    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print("speedup  " + " ".join(f"{a / b:9.1f}x" for a, b in zip(py, cy)))
    else:
        print("compiled backend not built; only the numpy kernels were timed")


if __name__ == "__main__":
    main()
