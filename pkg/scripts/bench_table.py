"""Benchmark table for the Lipschitz estimator (mean, spread, overestimation rate)."""
import argparse

from safeinit import lipschitz as L


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--functions", default=",".join(sorted(L.BENCHMARKS)))
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--beta", type=float, default=1e-2)
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    print(f"{'function':>8} {'L*':>7} {'mean':>7} {'std':>6} {'over%':>6}")
    for name in a.functions.split(","):
        fun = L.BENCHMARKS[name]
        s = L.summarize(fun, L.benchmark_runs(fun, a.n, a.beta, runs=a.runs, seed=a.seed))
        print(f"{name:>8} {fun.L_star:7.3f} {s.L_mean:7.3f} {s.L_std:6.3f} {100 * s.overestimate_freq:6.0f}")


if __name__ == "__main__":
    main()
