"""Seed sweep on the pendulum: estimate, certify, and check V decrease on the true plant."""
import argparse
import math

import numpy as np

from safeinit import experiments as E, synthesis as S
from safeinit.errors import SynthesisFailed


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--beta", type=float, default=0.01)
    ap.add_argument("--alpha", type=float, default=0.95)
    a = ap.parse_args()
    over = certified = decrease = 0
    Ls = []
    for seed in range(a.seeds):
        st = E.pendulum_setup(seed, beta=a.beta, synthesize=False)
        Lh = st.estimate.L_hat
        Ls.append(Lh)
        over += Lh > E.PEND_L_STAR
        try:
            cert = S.synthesize(st.model, Lh, S.SynthesisOptions(alphas=[a.alpha]))
        except SynthesisFailed:
            continue
        certified += S.verify_theorem1(st.model, cert).ok
        decrease += E.lyapunov_decrease_check(st.model, cert, E.pendulum_oracle, np.array([math.pi / 2, 0.0]))[0]
    print(f"L* = {E.PEND_L_STAR:.3f}; L_hat median {np.median(Ls):.3f}, range [{min(Ls):.3f}, {max(Ls):.3f}]")
    print(f"overestimates {over}/{a.seeds}, certified {certified}/{a.seeds}, V decrease {decrease}/{a.seeds}")


if __name__ == "__main__":
    main()
