import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safeinit import adp, experiments as E, synthesis as S
from safeinit.errors import BasisError, DomainError, ImprovementError, RankError
from safeinit.synthesis import ControllerCertificate, SynthesisOptions
from safeinit.sysmodel import SystemModel

P_STAR = (0.81 + math.sqrt(0.81 ** 2 + 4)) / 2  # scalar Riccati A=0.9, B=Q=R=1


def _scalar(v):
    return np.array([[float(v)]])


def _zero(q):
    return np.zeros(1)


SCALAR = SystemModel(_scalar(0.9), _scalar(1.0), _scalar(1.0), _scalar(1.0))
HALF_SQ = adp.BasisSet([(0.5, (2,))])
LQ = adp.CostFunction("quadratic", _scalar(1.0), _scalar(1.0))
SCALAR_CERT = ControllerCertificate(_scalar(-0.5), _scalar(1.0), 1.0, 0.9, 0.1)


def _lqr_config(**over):
    base = dict(gamma=1.0, eta=0.05, eps_ac=1e-10, max_iter=200, sweep_steps=20, n_starts=10,
                evaluation="lstsq", cost_probes=3, cost_horizon=50)
    base.update(over)
    return adp.LearnConfig(**base)


# basis

BASES = {
    "pendulum": adp.pendulum_basis(),
    "quadratic4": adp.quadratic_basis(4),
    "mixed": adp.BasisSet([(2.0, (3, 0, 1)), (1.0, (0, 0, 0)), (0.5, (0, 2, 2)), (1 / 3, (1, 1, 1))]),
}


@pytest.mark.parametrize("name", sorted(BASES))
def test_gradient_matches_finite_differences(name):
    b = BASES[name]
    rng = np.random.default_rng(0)
    for x in rng.uniform(-2, 2, (100, b.n_x)):
        J = b.gradient(x)
        for i in range(b.n_x):
            e = np.zeros(b.n_x)
            e[i] = 1e-5
            fd = (b(x + e) - b(x - e)) / 2e-5
            assert np.allclose(J[:, i], fd, rtol=1e-6, atol=1e-6 * (1 + np.abs(fd).max()))


def test_basis_batch_and_labels():
    b = adp.pendulum_basis()
    X = np.random.default_rng(1).standard_normal((7, 2))
    assert np.allclose(b(X), np.array([b(x) for x in X]))
    assert b.labels()[:3] == ["x1^2/2", "x2^2/2", "x1*x2"]
    assert b.n0 == 11 and not b.has_constant()
    with pytest.raises(BasisError):
        adp.BasisSet([])
    with pytest.raises(BasisError):
        adp.BasisSet([(1.0, (1, 0)), (1.0, (1,))])
    with pytest.raises(BasisError):
        adp.BasisSet([(1.0, (-1,))])


def test_init_weights_pendulum_basis():
    P = np.array([[3.0, 0.4], [0.4, 5.0]])
    w = adp.init_weights_from_P(adp.pendulum_basis(), P)
    assert np.allclose(w, [6.0, 10.0, 0.8] + [0.0] * 8)
    assert np.allclose(adp.init_weights_from_P(adp.BasisSet([(0.5, (2, 0)), (0.5, (0, 2)), (1.0, (1, 1))]),
                                               np.eye(2)), [2, 2, 0])


@pytest.mark.parametrize("n", [2, 5, 20])
def test_safe_initialization_identity(n):
    rng = np.random.default_rng(n)
    W = rng.standard_normal((n, n))
    P = W @ W.T + np.eye(n)
    basis = adp.quadratic_basis(n)
    approx = adp.ValueApproximator(basis, adp.init_weights_from_P(basis, P))
    for x in rng.standard_normal((100, n)):
        assert approx.value(x) == pytest.approx(x @ P @ x, rel=1e-12, abs=1e-12)
    assert approx.value(np.zeros(n)) == 0.0
    # symbolic check: identical monomial coefficients
    assert basis.polynomial(approx.omega) == pytest.approx(adp.quadratic_polynomial(P))


def test_init_weights_missing_term():
    with pytest.raises(BasisError):
        adp.init_weights_from_P(adp.BasisSet([(0.5, (2, 0)), (0.5, (0, 2))]), np.eye(2))
    with pytest.raises(BasisError):
        adp.init_weights_from_P(adp.pendulum_basis(), np.eye(3))


# evaluation step

def test_evaluation_step_examples():
    approx = adp.ValueApproximator(HALF_SQ, [0.0])
    w, r = adp.policy_evaluation_step(approx, np.array([1.0]), np.array([0.0]), 1.0, 1.0, 0.5)
    assert np.allclose(w, [0.25]) and r == 1.0
    approx = adp.ValueApproximator(HALF_SQ, [2.0])  # omega^T phi = 1 = U
    w, r = adp.policy_evaluation_step(approx, np.array([1.0]), np.array([0.0]), 1.0, 1.0, 0.5)
    assert np.array_equal(w, [2.0]) and r == 0.0
    approx = adp.ValueApproximator(HALF_SQ, [0.3])
    w, _ = adp.policy_evaluation_step(approx, np.array([1.0]), np.array([0.5]), 7.0, 0.9, 0.0)
    assert np.array_equal(w, [0.3])


def test_normalized_evaluation_step():
    approx = adp.ValueApproximator(HALF_SQ, [0.0])
    w, _ = adp.policy_evaluation_step(approx, np.array([1.0]), np.array([0.0]), 1.0, 1.0, 1.0, normalized=True)
    assert np.allclose(w, [2.0])  # a unit NLMS step solves the single equation
    w, _ = adp.policy_evaluation_step(approx, np.zeros(1), np.zeros(1), 1.0, 1.0, 1.0, normalized=True)
    assert np.array_equal(w, [0.0])
    # phi = 0.5, residual -1: step 1 / (1 + 0.25) = 0.8 gives omega 0.4
    w, _ = adp.policy_evaluation_step(approx, np.array([1.0]), np.array([0.0]), 1.0, 1.0, 1.0, normalized=True,
                                      delta=1.0)
    assert np.allclose(w, [0.4])
    with pytest.raises(ValueError):
        adp.LearnConfig(nlms_delta=-1.0)


# improvement

def test_unconstrained_improvement_examples():
    r = adp.policy_improvement_unconstrained(adp.ValueApproximator(HALF_SQ, [0.0]), SCALAR, np.array([1.0]),
                                             1.0, 1.0)
    assert r.converged and np.array_equal(r.u, [0.0])
    m0 = SystemModel(_scalar(0.0), _scalar(1.0), _scalar(1.0))
    for w in (0.5, 3.0, 10.0):
        r = adp.policy_improvement_unconstrained(adp.ValueApproximator(HALF_SQ, [w]), m0, np.array([1.0]), 1.0, 1.0)
        assert abs(r.u[0]) < 1e-10
    # affine case: u = -(w/2)(0.9 x + u) has the closed form below
    w, x = 2 * P_STAR, 0.7
    r = adp.policy_improvement_unconstrained(adp.ValueApproximator(HALF_SQ, [w]), SCALAR, np.array([x]), 1.0, 1.0)
    assert r.u[0] == pytest.approx(-(w / 2) * 0.9 * x / (1 + w / 2), abs=1e-10)


def test_improvement_uses_extracted_phi():
    approx = adp.ValueApproximator(HALF_SQ, [1.0])
    a = adp.policy_improvement_unconstrained(approx, SCALAR, np.array([1.0]), 1.0, 1.0)
    b = adp.policy_improvement_unconstrained(approx, SCALAR, np.array([1.0]), 1.0, 1.0, phi_hat=np.array([0.3]))
    # u = -(1/2)(0.9 + phi + u)
    assert a.u[0] == pytest.approx(-0.3) and b.u[0] == pytest.approx(-0.4)


def test_improvement_steep_value_converges():
    # slope of the plain fixed-point map is -w/2 = -6: damping 0.5 alone would diverge
    approx = adp.ValueApproximator(HALF_SQ, [12.0])
    r = adp.policy_improvement_unconstrained(approx, SCALAR, np.array([1.0]), 1.0, 1.0)
    assert r.converged and r.u[0] == pytest.approx(-6 * 0.9 / 7, abs=1e-10)


def test_constrained_improvement_examples():
    approx = adp.ValueApproximator(HALF_SQ, [0.0])
    r = adp.policy_improvement_constrained(approx, SCALAR, np.array([1.0]), 1.0, 1.0, 2.0)
    assert np.array_equal(r.u, [0.0])
    huge = adp.ValueApproximator(HALF_SQ, [1e6])
    r = adp.policy_improvement_constrained(huge, SystemModel(_scalar(0.9), _scalar(1e-3), _scalar(1.0)),
                                           np.array([5.0]), 1.0, 1.0, 2.0)
    assert -2.0 < r.u[0] < -1.99


def test_constrained_improvement_matches_grid_search():
    ubar, R, gamma, w, x = 1.0, 0.5, 0.95, 3.0, 2.0
    model = SystemModel(_scalar(0.9), _scalar(0.5), _scalar(1.0))
    approx = adp.ValueApproximator(HALF_SQ, [w])
    r = adp.policy_improvement_constrained(approx, model, np.array([x]), R, gamma, ubar)
    grid = np.arange(-ubar + 1e-4, ubar, 1e-4)
    obj = [adp.constrained_input_penalty(u, ubar, _scalar(R)) + gamma * 0.5 * w * (0.9 * x + 0.5 * u) ** 2
           for u in grid]
    assert r.u[0] == pytest.approx(grid[int(np.argmin(obj))], abs=1e-3)


@settings(max_examples=200)
@given(st.floats(-1e3, 1e3), st.floats(-50, 50), st.floats(0.1, 5))
def test_constrained_improvement_strictly_inside(w, x, ubar):
    approx = adp.ValueApproximator(HALF_SQ, [w])
    r = adp.policy_improvement_constrained(approx, SCALAR, np.array([x]), 1.0, 0.95, ubar, raise_on_fail=False)
    assert np.max(np.abs(r.u)) / ubar <= 1 - 1e-12


# constrained cost

def test_constrained_cost_examples():
    assert adp.constrained_cost(np.zeros(1), 1.0, _scalar(0.5), Qx=3.0) == 3.0
    near = adp.constrained_input_penalty(np.array([1 - 1e-12]), 1.0, _scalar(0.5))
    assert near == pytest.approx(2 * math.log(2) * 0.5, abs=1e-9)
    assert 2 * math.log(2) * 0.5 == pytest.approx(0.693147, abs=1e-6)
    with pytest.raises(DomainError):
        adp.constrained_input_penalty(np.array([1.0]), 1.0, _scalar(1.0))
    with pytest.raises(DomainError):
        adp.constrained_input_penalty(np.array([0.1]), 0.0, _scalar(1.0))


@settings(max_examples=1000)
@given(st.floats(-0.999, 0.999), st.floats(0.05, 10), st.floats(0.01, 10))
def test_constrained_cost_matches_quadrature(frac, ubar, R):
    quad = pytest.importorskip("scipy.integrate").quad
    u = frac * ubar
    closed = adp.constrained_input_penalty(np.array([u]), ubar, _scalar(R))
    val, _ = quad(lambda v: 2 * ubar * math.atanh(v / ubar) * R, 0.0, u, epsabs=1e-13, epsrel=1e-13, limit=200)
    assert closed == pytest.approx(val, abs=1e-8)
    assert closed == pytest.approx(adp.constrained_input_penalty(np.array([-u]), ubar, _scalar(R)), abs=1e-12)


def test_cost_function_variants():
    Q = np.diag([1.0, 2.0])
    assert adp.CostFunction("l1", Q, _scalar(0.5))(np.array([1.0, -1.0]), np.array([2.0])) == pytest.approx(5.0)
    assert adp.CostFunction("quadratic", Q, _scalar(0.5))(np.array([1.0, -1.0]), np.array([2.0])) == pytest.approx(5.0)
    c = adp.CostFunction("constrained", Q, _scalar(0.5), ubar=1.0)
    assert c(np.zeros(2), np.zeros(1)) == 0.0
    with pytest.raises(ValueError):
        adp.CostFunction("constrained", Q, _scalar(0.5))
    with pytest.raises(ValueError):
        adp.CostFunction("quadratic", Q, _scalar(0.0))
    with pytest.raises(ValueError):
        adp.CostFunction("huber", Q, _scalar(1.0))


# learning loops

@pytest.mark.parametrize("evaluation", ["lstsq", "sgd"])
def test_scalar_lqr_policy_iteration(evaluation):
    cfg = _lqr_config(evaluation=evaluation, eval_epochs=50 if evaluation == "sgd" else 1)
    r = adp.run_policy_iteration(SCALAR, _zero, SCALAR_CERT, LQ, cfg, HALF_SQ)
    K, P = S.riccati_lqr(0.9, 1.0, 1.0, 1.0)
    assert r.converged
    assert r.omega[0] == pytest.approx(2 * P[0, 0], abs=1e-3)
    assert r.omega[0] == pytest.approx(2.96780, abs=1e-3)
    assert r.policy(np.array([1.0]))[0] == pytest.approx(K[0, 0], abs=1e-3)
    # accumulated cost is nonincreasing across iterations
    assert np.all(np.diff(r.costs) <= 1e-6)


def test_scalar_lqr_value_iteration():
    r = adp.run_value_iteration(SCALAR, _zero, SCALAR_CERT, LQ, _lqr_config(max_iter=500), HALF_SQ)
    assert r.converged and r.omega[0] == pytest.approx(2 * P_STAR, abs=1e-3)


def test_huge_tolerance_stops_after_one_iteration():
    r = adp.run_policy_iteration(SCALAR, _zero, SCALAR_CERT, LQ, _lqr_config(eps_ac=1e12), HALF_SQ)
    assert r.iterations == 1 and r.converged and len(r.omegas) == 2


def test_value_iteration_gamma_zero_fits_stage_cost():
    r = adp.run_value_iteration(SCALAR, _zero, SCALAR_CERT, LQ, _lqr_config(gamma=1e-300, max_iter=1), HALF_SQ)
    # with u = -0.5 x the stage cost is 1.25 x^2 = 2.5 * x^2 / 2
    assert r.omega[0] == pytest.approx(2.5, rel=1e-9)


def test_value_iteration_rank_error_names_terms():
    model = SystemModel(np.diag([0.5, 0.5]), np.array([[1.0], [0.0]]), np.eye(2))
    cert = ControllerCertificate(np.zeros((1, 2)), np.eye(2), 1.0, 0.9, 0.1)
    cfg = _lqr_config(vi_rank_sweeps=3, start_sampler=lambda rng: np.array([rng.uniform(-1, 1), 0.0]))
    cost = adp.CostFunction("quadratic", np.eye(2), _scalar(1.0))
    with pytest.raises(RankError) as exc:
        adp.run_value_iteration(model, lambda q: np.zeros(2), cert, cost, cfg)
    assert set(exc.value.deficient_terms) == {"x1*x2", "x2^2/2"}


def test_training_log(tmp_path):
    r = adp.run_policy_iteration(SCALAR, _zero, SCALAR_CERT, LQ, _lqr_config(), HALF_SQ)
    path = tmp_path / "train.csv"
    r.write_log(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["iter", "residual", "value_change", "cost", "omega_1"]
    assert len(rows) == r.iterations + 2 and float(rows[-1][4]) == r.omega[0]


def test_learn_config_validation():
    with pytest.raises(ValueError):
        adp.LearnConfig(gamma=0.0)
    with pytest.raises(ValueError):
        adp.LearnConfig(gamma=1.5)
    with pytest.raises(ValueError):
        adp.LearnConfig(eta=-1.0)
    with pytest.raises(ValueError):
        adp.LearnConfig(evaluation="adam")
    c = adp.LearnConfig(eta=1.0, eta_decay=10.0)
    etas = [c.eta_at(k) for k in range(50)]
    assert all(a >= b > 0 for a, b in zip(etas, etas[1:]))


def test_certified_start_never_diverges():
    # unstable scalar plant with a sector nonlinearity; 100 seeded PI runs from the certificate
    model = SystemModel(_scalar(1.1), _scalar(1.0), _scalar(1.0), _scalar(1.0))
    L = 0.2
    cert = S.synthesize(model, L, SynthesisOptions(alphas=[0.9]))
    oracle = lambda q: L * np.sin(3 * np.atleast_1d(q)) / 3  # noqa: E731
    for seed in range(100):
        cfg = adp.LearnConfig(gamma=0.95, eta=0.01, eps_ac=1e-8, max_iter=5, sweep_steps=30, n_starts=3,
                              evaluation="sgd", cost_probes=2, cost_horizon=40, seed=seed, probe_scale=2.0)
        r = adp.run_policy_iteration(model, oracle, cert, LQ, cfg, HALF_SQ)
        assert np.all(np.isfinite(r.costs))


# admissibility

def test_admissibility_examples():
    cost = adp.CostFunction("quadratic", _scalar(1.0), _scalar(1.0))
    unstable = SystemModel(_scalar(2.0), _scalar(1.0), _scalar(1.0))
    rep = adp.admissibility_check(unstable, _zero, adp.LinearPolicy(np.zeros((1, 1))), cost, 0.95, [[1.0]])
    assert not rep.all_admissible
    # nilpotent closed loop reaches zero in two steps
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    model = SystemModel(A + np.array([[0.0, 0.0], [0.0, 1.0]]), np.array([[0.0], [1.0]]), np.eye(2))
    dead = adp.LinearPolicy(np.array([[0.0, -1.0]]))
    rep = adp.admissibility_check(model, lambda q: np.zeros(2), dead, adp.CostFunction("quadratic", np.eye(2), _scalar(1.0)),
                                  0.95, [[1.0, 1.0], [-2.0, 0.5]], horizon=20)
    assert rep.all_admissible and all(v.steps_to_zero == 2 for v in rep.verdicts)


def test_certified_pendulum_gain_is_admissible():
    model = E.pendulum_model()
    cert = S.synthesize(model, 11.511, SynthesisOptions(alphas=[0.95]))
    grid = np.array([(a, b) for a in np.linspace(-np.pi, np.pi, 7) for b in np.linspace(-2, 2, 5)])
    cost = adp.CostFunction("quadratic", np.eye(2), _scalar(0.5))
    rep = adp.admissibility_check(model, E.pendulum_oracle, adp.LinearPolicy(cert.K0), cost, 0.95, grid)
    assert rep.all_admissible and rep.fraction == 1.0


def test_rollout_flags_a_policy_with_no_finite_input():
    def stuck(x, phi_hat=None):
        if abs(x[0]) > 1.5:
            raise ImprovementError("no fixed point", iterations=100, residual=float("nan"))
        return np.zeros(1)

    r = adp.rollout(SystemModel(_scalar(2.0), _scalar(1.0), _scalar(1.0)), lambda q: np.zeros(1), stuck,
                    np.array([1.0]), 10)
    assert r.diverged and len(r.inputs) == 1 and np.allclose(r.states[:, 0], [1.0, 2.0])
