"""Certified PI on the random 20-state, 10-input system."""
import argparse

from safeinit import experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/linear20")
    a = ap.parse_args()
    r = E.run_linear20(a.seed, a.out)
    print(f"L_hat {r.L_hat:.3f} (true {r.L_true:.3f}), alpha {r.certificate.alpha}, "
          f"rho(A+BK0) {r.spectral_radius:.3f}")
    print(f"PI: {r.learn.iterations} iterations, converged {r.learn.converged}")
    print(f"test starts: max |x_T| {r.final_norms.max():.2e}, diverged {r.diverged}")
    print("timings: " + ", ".join(f"{k} {v:.1f} s" for k, v in r.timings.items()))


if __name__ == "__main__":
    main()
