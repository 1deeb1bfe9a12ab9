"""Accumulated quadratic cost of four PI initializations on the pendulum over several seeds."""
import argparse
import os

from safeinit import experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--iterations", type=int, default=20)
    ap.add_argument("--out", default="out/compare")
    a = ap.parse_args()
    labels = ["lipschitz_beta_0.1", "lipschitz_beta_0.001", "riccati_ignore_nonlinearity", "random_small_weights"]
    print("seed " + " ".join(f"{lab:>28}" for lab in labels))
    for seed in range(a.seeds):
        s = E.run_pendulum("unconstrained-pi", seed, os.path.join(a.out, str(seed)), iterations=a.iterations)
        cells = [f"{s[f'cost[{lab}]']:>22.1f}{' (div)' if s[f'diverged[{lab}]'] else '      '}" for lab in labels]
        print(f"{seed:>4} " + " ".join(cells))


if __name__ == "__main__":
    main()
