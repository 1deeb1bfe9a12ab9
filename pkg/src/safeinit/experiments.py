"""Reproducible experiment pipelines: torsional pendulum and a random 20-state system."""
from __future__ import annotations

import csv
import math
import os
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import adp, lipschitz, synthesis
from .errors import SafeAbort, SynthesisFailed
from .sysmodel import Dataset, SystemModel, detect_relevant_inputs, extract_phi_samples

# torsional pendulum, Euler-discretized
PEND_M = 1.0 / 3.0
PEND_L = 2.0 / 3.0
PEND_G = 9.81
PEND_J = 0.1975
PEND_FD = 0.2
PEND_TAU = 0.01
PEND_L_STAR = PEND_M * PEND_G * PEND_L / PEND_J  # 11.038


def stage_seed(master, stage):
    """Independent integer seed for a named stage of one experiment."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(stage.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def pendulum_model(known_C_q=True):
    tau = PEND_TAU
    A = np.eye(2) + tau * np.array([[0.0, 1.0], [0.0, -PEND_FD]])
    B = tau * np.array([[0.0], [1.0]])
    G = tau * np.array([[0.0], [-1.0]])
    C_q = np.array([[1.0, 0.0]]) if known_C_q else None
    return SystemModel(A, B, G, C_q, check_binary_G=False)


def pendulum_phi(q):
    q = np.atleast_1d(np.asarray(q, dtype=float))
    return np.array([PEND_L_STAR * math.sin(q[0])])


def pendulum_phi_full(x):
    return pendulum_phi(np.asarray(x)[:1])


def collect_pendulum_data(seed, n_ic=10, per_ic=5, sample_every=0.1, u_amp=1.0):
    """N = n_ic * per_ic transitions of the true plant, one every ``sample_every`` seconds.

    Initial conditions are uniform in [-pi, pi] x [-2, 2]; the input is held
    uniform in [-u_amp, u_amp] and redrawn every step.
    """
    rng = np.random.default_rng(seed)
    model = pendulum_model(known_C_q=False)
    stride = int(round(sample_every / PEND_TAU))
    X, U, Xp = [], [], []
    for _ in range(n_ic):
        x = np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-2.0, 2.0)])
        for k in range(per_ic * stride):
            u = rng.uniform(-u_amp, u_amp, size=1)
            xn = model.A @ x + model.B @ u + model.G @ pendulum_phi(x[:1])
            if k % stride == 0:
                X.append(x)
                U.append(u)
                Xp.append(xn)
            x = xn
    return Dataset(np.array(X), np.array(U), np.array(Xp))


PENDULUM_LIP = lipschitz.LipschitzConfig(beta=0.01, kernel="epanechnikov", bandwidth=0.05)


def estimate_from_data(data: Dataset, model: SystemModel, config: lipschitz.LipschitzConfig,
                       detect_inputs=True):
    """Relevance detection on the full state, then Lipschitz estimation on the relevant q."""
    full = SystemModel(model.A, model.B, model.G, None, model.check_binary_G)
    samples = extract_phi_samples(full, data)
    mask = np.ones(model.n_x, dtype=bool)
    if detect_inputs:
        m = detect_relevant_inputs(samples.q, samples.phi)
        if m.any():
            mask = m
    narrowed = full.with_relevance_mask(mask)
    samples = extract_phi_samples(narrowed, data)
    est = lipschitz.estimate_lipschitz(samples, config)
    return narrowed, est, mask


def write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    return str(v)


def kde_curve_rows(est, n=512):
    kde = est.kde
    hi = lipschitz._grid_upper(kde)
    grid = np.linspace(0.0, hi, n)
    return [(float(g), float(d)) for g, d in zip(grid, kde.evaluate(grid))]


# ---------------------------------------------------------------------------
# pendulum


def pendulum_learn_config(seed, constrained=False, cert=None, **over):
    cfg = dict(gamma=0.95, eta=1e-4, eps_ac=1e-6, max_iter=20, sweep_steps=200, n_starts=1,
               probe_count=100, probe_scale=1.0, cost_probes=10, cost_horizon=200, seed=seed)
    if constrained and cert is not None:
        cfg["start_sampler"] = ellipsoid_sampler(cert.P, interior=True)
        cfg["probe_scale"] = 1.0 / math.sqrt(float(np.linalg.eigvalsh(cert.P)[-1]))
    else:
        cfg["start_sampler"] = box_sampler([-math.pi, -2.0], [math.pi, 2.0])
    cfg.update(over)
    return adp.LearnConfig(**cfg)


def box_sampler(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return lambda rng: rng.uniform(lo, hi)


def ellipsoid_sampler(P, interior=True):
    """Uniform-direction points with x^T P x <= 1 (or = 1 when not interior)."""
    L = np.linalg.cholesky(np.linalg.inv(P))

    def sample(rng):
        d = rng.standard_normal(len(P))
        d /= np.linalg.norm(d)
        r = rng.random() ** (1.0 / len(P)) if interior else 1.0
        return r * (L @ d)

    return sample


def ellipsoid_boundary_points(P, count, seed):
    rng = np.random.default_rng(seed)
    s = ellipsoid_sampler(P, interior=False)
    return np.array([s(rng) for _ in range(count)])


@dataclass
class PendulumSetup:
    model: SystemModel
    data: Dataset
    estimate: lipschitz.LipschitzEstimate
    certificate: synthesis.ControllerCertificate | None
    mask: np.ndarray
    timings: dict = field(default_factory=dict)


def pendulum_setup(seed, beta=0.01, lip=PENDULUM_LIP, alpha=0.95, nu=None, ubar=None, synthesize=True):
    t0 = time.perf_counter()
    data = collect_pendulum_data(stage_seed(seed, "collect"))
    t1 = time.perf_counter()
    model, est, mask = estimate_from_data(data, pendulum_model(), replace(lip, beta=beta,
                                                                          seed=stage_seed(seed, "pairs")))
    t2 = time.perf_counter()
    cert = None
    if synthesize:
        opts = synthesis.SynthesisOptions(alphas=[alpha], nu=nu, ubar=ubar)
        cert = synthesis.synthesize(model, est.L_hat, opts)
    t3 = time.perf_counter()
    return PendulumSetup(model, data, est, cert, mask,
                         dict(collect=t1 - t0, estimate=t2 - t1, synthesize=t3 - t2))


def lyapunov_decrease_check(model, cert, oracle, x0, steps=50, slack=1e-9):
    """V(x_t+1) <= alpha^2 V(x_t) + slack along the true closed loop under K0."""
    x = np.asarray(x0, float)
    worst = -np.inf
    ok = True
    for _ in range(steps):
        xn = model.A @ x + model.B @ (cert.K0 @ x) + model.G @ oracle(model.C_q @ x)
        v, vn = x @ cert.P @ x, xn @ cert.P @ xn
        worst = max(worst, vn - cert.alpha ** 2 * v)
        ok &= vn <= cert.alpha ** 2 * v + slack
        x = xn
    return bool(ok), float(worst)


def pendulum_oracle(q):
    return pendulum_phi(q)


def riccati_initializer(model, Q, R):
    K, P = synthesis.riccati_lqr(model.A, model.B, Q, R)
    return synthesis.ControllerCertificate(K, P, 1.0, 0.99, 0.0)


def run_pendulum(mode, seed, out_dir, iterations=20, n_random=1):
    """Runs one pendulum scenario and writes its CSVs; returns a summary dict."""
    os.makedirs(out_dir, exist_ok=True)
    if mode == "collect":
        data = collect_pendulum_data(stage_seed(seed, "collect"))
        path = os.path.join(out_dir, "pendulum_data.csv")
        data.to_csv(path)
        return {"data": path, "N": len(data)}
    basis = adp.pendulum_basis()
    Q = np.eye(2)
    R = np.array([[0.5]])
    summary = {}
    x0_plot = np.array([math.pi / 2, 0.0])
    if mode == "unconstrained-pi":
        cost = adp.CostFunction("l1", Q, R)
        runs = {}
        for label, beta in (("lipschitz_beta_0.1", 0.1), ("lipschitz_beta_0.001", 0.001)):
            st = pendulum_setup(seed, beta=beta)
            summary[f"L_hat[{label}]"] = st.estimate.L_hat
            runs[label] = (st.model, st.certificate, None, None)
        model = pendulum_model()
        runs["riccati_ignore_nonlinearity"] = (model, riccati_initializer(model, Q, R), None, None)
        rng = np.random.default_rng(stage_seed(seed, "random-weights"))
        w = 1e-2 * rng.standard_normal(basis.n0)
        runs["random_small_weights"] = (model, riccati_initializer(model, Q, R), w, "greedy")
        curves = []
        for label, (model, cert, w0, init) in runs.items():
            # plain LMS at eta=1e-4 is unstable on the large polynomial regressors the certified
            # high-gain K0 excites from box starts; the regularized normalized step is not
            cfg = pendulum_learn_config(stage_seed(seed, "learn"), max_iter=iterations, evaluation="nlms",
                                        nlms_delta=1.0)
            try:
                res = adp.run_policy_iteration(model, pendulum_oracle, cert, cost, cfg, basis, omega0=w0,
                                               initial_policy=init)
            except SafeAbort as e:
                # a learning rollout left the safe region: recorded as a diverged run
                summary[f"cost[{label}]"] = math.inf
                summary[f"diverged[{label}]"] = True
                summary[f"aborted_at[{label}]"] = e.iteration
                continue
            res.write_log(os.path.join(out_dir, f"train_{label}.csv"))
            r = adp.rollout(model, pendulum_oracle, res.policy, x0_plot, 500, cost)
            acc = np.cumsum(r.costs)
            quad = np.cumsum([x @ Q @ x + u @ R @ u for x, u in zip(r.states[:-1], r.inputs)])
            for t in range(len(r.inputs)):
                curves.append((label, t, *r.states[t], r.inputs[t][0], acc[t], quad[t]))
            summary[f"cost[{label}]"] = math.inf if r.diverged else float(quad[-1])
            summary[f"diverged[{label}]"] = bool(r.diverged)
        write_rows(os.path.join(out_dir, "pendulum_compare.csv"),
                   ["label", "t", "x1", "x2", "u", "cost_l1", "cost_quadratic"], curves)
        return summary
    if mode in ("constrained-pi", "vi"):
        constrained = mode == "constrained-pi"
        st = pendulum_setup(seed, ubar=1.0 if constrained else None)
        cert = st.certificate
        cert.save(os.path.join(out_dir, "certificate.txt"))
        if constrained:
            cost = adp.CostFunction("constrained", Q, R, ubar=1.0)
            cfg = pendulum_learn_config(stage_seed(seed, "learn"), True, cert, max_iter=iterations)
            res = adp.run_policy_iteration(st.model, pendulum_oracle, cert, cost, cfg, basis)
            starts = ellipsoid_boundary_points(cert.P, 20, stage_seed(seed, "starts"))
        else:
            cost = adp.CostFunction("quadratic", Q, R)
            cfg = pendulum_learn_config(stage_seed(seed, "learn"), max_iter=iterations)
            res = adp.run_value_iteration(st.model, pendulum_oracle, cert, cost, cfg, basis)
            starts = box_sampler([-math.pi, -2.0], [math.pi, 2.0])
            rng = np.random.default_rng(stage_seed(seed, "starts"))
            starts = np.array([starts(rng) for _ in range(20)])
        res.write_log(os.path.join(out_dir, f"train_{mode}.csv"))
        rows = []
        max_u, final = 0.0, []
        diverged = 0
        for i, x0 in enumerate(starts):
            r = adp.rollout(st.model, pendulum_oracle, res.policy, x0, 500, cost)
            diverged += int(r.diverged)
            max_u = max(max_u, float(np.abs(r.inputs).max()))
            final.append(float(np.linalg.norm(r.states[-1])))
            for t in range(len(r.inputs)):
                rows.append((i, t, *r.states[t], r.inputs[t][0], float(np.linalg.norm(r.states[t]))))
        write_rows(os.path.join(out_dir, f"trajectories_{mode}.csv"),
                   ["start", "t", "x1", "x2", "u", "norm_x"], rows)
        summary.update(L_hat=st.estimate.L_hat, max_abs_u=max_u, max_final_norm=max(final),
                       diverged=diverged, iterations=res.iterations)
        return summary
    raise ValueError(f"unknown pendulum mode {mode!r}")


# ---------------------------------------------------------------------------
# 20-state linear system


@dataclass
class Linear20Result:
    model: SystemModel
    A_true: np.ndarray
    L_hat: float
    L_true: float
    certificate: synthesis.ControllerCertificate
    spectral_radius: float
    learn: adp.LearnResult
    final_norms: np.ndarray
    diverged: int
    timings: dict


def random_linear_system(seed, n_x=20, n_u=10, n_unstable=3, delta_norm=0.2, b_scale=1.0):
    """(A0, B, Delta): a random unstable A0 controllable through B, plus the unknown Delta.

    A0 = Q diag(lam) Q^T with Q random orthogonal, ``n_unstable`` eigenvalues
    in [1.01, 1.1] and the rest in [-0.3, 0.3].  Delta is Gaussian, rescaled
    to spectral norm ``delta_norm``.  With G = C_q = I the certificate is a
    small-gain condition on the whole closed loop, so a strongly non-normal
    A0 (plain Gaussian) leaves no certifiable margin for any useful L.
    """
    rng = np.random.default_rng(seed)
    while True:
        Q, _ = np.linalg.qr(rng.standard_normal((n_x, n_x)))
        lam = np.concatenate([rng.uniform(1.01, 1.1, n_unstable), rng.uniform(-0.3, 0.3, n_x - n_unstable)])
        A0 = Q @ np.diag(lam) @ Q.T
        B = b_scale * rng.standard_normal((n_x, n_u))
        ctrb = np.hstack([np.linalg.matrix_power(A0, k) @ B for k in range(n_x)])
        if np.linalg.matrix_rank(ctrb) == n_x:
            break
    Delta = rng.standard_normal((n_x, n_x))
    Delta *= delta_norm / np.linalg.norm(Delta, 2)
    return A0, B, Delta


def run_linear20(seed, out_dir=None, n_data=500, amplitude=0.1, n_test=100, horizon=500, max_iter=30,
                 beta=1e-3, test_var=2.0):
    t0 = time.perf_counter()
    A0, B, Delta = random_linear_system(stage_seed(seed, "system"))
    A = A0 + Delta
    n_x, n_u = B.shape
    model = SystemModel(A0, B, np.eye(n_x), np.eye(n_x))
    rng = np.random.default_rng(stage_seed(seed, "data"))
    X = rng.uniform(-1.0, 1.0, (n_data, n_x))
    U = rng.uniform(-amplitude, amplitude, (n_data, n_u))
    data = Dataset(X, U, X @ A.T + U @ B.T)
    samples = extract_phi_samples(model, data)
    t1 = time.perf_counter()
    est = lipschitz.estimate_lipschitz(samples, lipschitz.LipschitzConfig(beta=beta, seed=stage_seed(seed, "pairs")))
    t2 = time.perf_counter()
    cert = synthesis.synthesize(model, est.L_hat, synthesis.SynthesisOptions())
    rho = float(max(abs(np.linalg.eigvals(A0 + B @ cert.K0))))
    t3 = time.perf_counter()
    oracle = lambda q: Delta @ q  # noqa: E731
    cost = adp.CostFunction("quadratic", 5.0 * np.eye(n_x), 2.0 * np.eye(n_u))
    cfg = adp.LearnConfig(gamma=0.95, eta=0.1, eps_ac=1e-6, max_iter=max_iter, sweep_steps=600,
                          n_starts=300, evaluation="lstsq", probe_count=100, probe_scale=1.0,
                          cost_probes=5, cost_horizon=100, seed=stage_seed(seed, "learn"),
                          use_phi_hat=False)
    learn = adp.run_policy_iteration(model, oracle, cert, cost, cfg, adp.quadratic_basis(n_x))
    t4 = time.perf_counter()
    starts = np.sqrt(test_var) * np.random.default_rng(stage_seed(seed, "test")).standard_normal((n_test, n_x))
    finals, diverged, rows = [], 0, []
    for i, x0 in enumerate(starts):
        r = adp.rollout(model, oracle, learn.policy, x0, horizon)
        diverged += int(r.diverged)
        finals.append(float(np.linalg.norm(r.states[-1])))
        rows.append((i, float(np.linalg.norm(x0)), finals[-1], bool(r.diverged)))
    t5 = time.perf_counter()
    L_true = float(np.linalg.norm(Delta, 2))
    res = Linear20Result(model, A, est.L_hat, L_true, cert, rho, learn, np.array(finals), diverged,
                         dict(data=t1 - t0, estimate=t2 - t1, synthesize=t3 - t2, learn=t4 - t3, test=t5 - t4))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        cert.save(os.path.join(out_dir, "certificate.txt"))
        learn.write_log(os.path.join(out_dir, "train_linear20.csv"))
        write_rows(os.path.join(out_dir, "linear20_tests.csv"), ["start", "norm_x0", "norm_xT", "diverged"], rows)
        write_rows(os.path.join(out_dir, "linear20_kde.csv"), ["ell", "density"], kde_curve_rows(est))
        write_rows(os.path.join(out_dir, "linear20_summary.csv"), ["key", "value"],
                   [("L_hat", est.L_hat), ("L_true", L_true), ("alpha", cert.alpha),
                    ("spectral_radius", rho), ("pi_iterations", learn.iterations),
                    ("final_value_change", learn.log[-1]["value_change"]),
                    ("max_final_norm", max(finals)), ("diverged", diverged)])
    return res


__all__ = ["SynthesisFailed"]
