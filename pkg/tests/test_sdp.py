import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safeinit import sdp
from safeinit.sdp import LmiConstraint, SolverOptions, VariableLayout
from safeinit.synthesis import build_stability_lmi
from safeinit.sysmodel import SystemModel


def _scalar(v):
    return np.array([[float(v)]])


def _half_line(name, a, b, sense="NSD"):
    # 1x1 block a + b z on a single free coordinate
    return LmiConstraint(name, _scalar(a), np.array([[[float(b)]]]), sense)


FREE1 = VariableLayout(0, (1, 1), has_nu=False)


def _random_feasible(seed, n_cons=3, dim=3):
    """Constraints built around a point z0 where each holds with margin >= 0.5."""
    rng = np.random.default_rng(seed)
    layout = VariableLayout(2, (1, 2), has_nu=True)
    S0 = np.eye(2) + 0.3 * np.diag(rng.random(2))
    z0 = layout.flatten(S0, rng.standard_normal((1, 2)), 0.5 + rng.random())
    cons = []
    for k in range(n_cons):
        coeffs = rng.standard_normal((layout.size, dim, dim))
        coeffs = 0.5 * (coeffs + coeffs.transpose(0, 2, 1))
        W = rng.standard_normal((dim, dim))
        target = -(0.5 * np.eye(dim) + W @ W.T / dim)
        sense = "NSD" if k % 2 == 0 else "PSD"
        if sense == "PSD":
            target = -target
        C0 = target - np.tensordot(z0, coeffs, axes=1)
        cons.append(LmiConstraint(f"c{k}", C0, coeffs, sense))
    return cons, layout, z0


def test_flatten_round_trip():
    lay = VariableLayout(3, (2, 3))
    rng = np.random.default_rng(0)
    S = rng.standard_normal((3, 3))
    S = S + S.T
    Y = rng.standard_normal((2, 3))
    S2, Y2, nu = lay.unflatten(lay.flatten(S, Y, 0.7))
    assert np.allclose(S2, S) and np.allclose(Y2, Y) and nu == 0.7
    assert lay.size == 6 + 6 + 1
    with pytest.raises(ValueError):
        lay.unflatten(np.zeros(4))


def test_constant_only_constraint():
    c = LmiConstraint("k", -np.eye(2), np.zeros((3, 2, 2)))
    assert np.array_equal(c.assemble(np.array([5.0, -1.0, 2.0])), -np.eye(2))


def test_scalar_stability_block():
    one = _scalar(1.0)
    model = SystemModel(_scalar(0.5), one, one, one)
    con, lay = build_stability_lmi(model, 1.0, 0.9)
    M = con.assemble(lay.flatten(one, np.zeros((1, 1)), 1.0))
    expect = [[-0.81, 0, 0.5, 1], [0, -1, 1, 0], [0.5, 1, -1, 0], [1, 0, 0, -1]]
    assert np.allclose(M, expect, atol=1e-15)


def test_from_function_matches_direct_evaluation():
    lay = VariableLayout(2, (1, 2))
    fn = lambda S, Y, nu: np.block([[S, Y.T], [Y, -nu * np.ones((1, 1))]])  # noqa: E731
    con = LmiConstraint.from_function("f", lay, fn)
    z = np.random.default_rng(1).standard_normal(lay.size)
    assert np.allclose(con.assemble(z), fn(*lay.unflatten(z)))


def test_half_line_feasible():
    res = sdp.solve_feasibility([_half_line("z+1<=0", 1.0, 1.0)], FREE1)
    assert res.feasible and res.z[0] <= -1 - res.eps


def test_contradictory_pair_infeasible():
    cons = [_half_line("z+1<=0", 1.0, 1.0), _half_line("1-z<=0", 1.0, -1.0)]
    res = sdp.solve_feasibility(cons, FREE1, SolverOptions(max_iter=5000))
    assert res.status == "infeasible-suspected"


@pytest.mark.parametrize("method", ["ralg", "polyak"])
def test_unknown_inputs_rejected(method):
    with pytest.raises(ValueError):
        sdp.solve_feasibility([], FREE1)
    with pytest.raises(ValueError):
        sdp.solve_feasibility([_half_line("a", 1, 1)], VariableLayout(1, (1, 1)), SolverOptions(method=method))
    with pytest.raises(ValueError):
        sdp.solve_feasibility([_half_line("a", 1, 1)], FREE1, SolverOptions(method="newton"))


def test_verify_examples():
    one = _scalar(1.0)
    model = SystemModel(_scalar(0.5), one, one, one)
    con, lay = build_stability_lmi(model, 0.1, 0.9)
    res = sdp.solve_feasibility([con], lay)
    assert res.feasible and sdp.verify([con], res.z, res.eps, lay).certified
    # push one block past the boundary by +0.1
    bad = LmiConstraint("bad", np.zeros((1, 1)), np.array([[[1.0]]]))
    rep = sdp.verify([_half_line("ok", -1.0, 0.0), bad], np.array([0.1]), 1e-6)
    assert not rep.certified and rep.failing == ["bad"] and rep.extreme_eigs["bad"] == pytest.approx(0.1)


def test_verify_zero_margin_boundary():
    c = LmiConstraint("b", np.zeros((1, 1)), np.array([[[1.0]]]))
    assert sdp.verify([c], np.array([0.0]), 0.0).certified
    assert not sdp.verify([c], np.array([1e-300]), 0.0).certified


def test_verify_checks_clamps():
    lay = VariableLayout(1, (0, 0), has_nu=True)
    c = LmiConstraint("free", -np.eye(1), np.zeros((2, 1, 1)))
    assert sdp.verify([c], np.array([1.0, 1.0]), 1e-6, lay).certified
    assert not sdp.verify([c], np.array([-1.0, 1.0]), 1e-6, lay).clamps_ok
    assert not sdp.verify([c], np.array([1.0, 0.0]), 1e-6, lay).certified


@pytest.mark.parametrize("method", ["ralg", "polyak"])
def test_deterministic(method):
    cons, lay, _ = _random_feasible(3)
    opts = SolverOptions(seed=7, method=method, max_iter=3000)
    a = sdp.solve_feasibility(cons, lay, opts)
    b = sdp.solve_feasibility(cons, lay, opts)
    assert np.array_equal(a.z, b.z) and a.iterations == b.iterations


@settings(max_examples=200)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_feasible_instances_certify(seed):
    cons, lay, _ = _random_feasible(seed)
    res = sdp.solve_feasibility(cons, lay, SolverOptions(seed=seed % 1000))
    assert res.feasible, res.merit
    rep = sdp.verify(cons, res.z, res.eps, lay)
    assert rep.certified, rep.extreme_eigs


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_merit_is_convex(seed):
    cons, lay, _ = _random_feasible(seed)
    rng = np.random.default_rng(seed)
    z1, z2 = rng.standard_normal((2, lay.size))
    f = lambda z: sdp.merit(cons, z)[0]  # noqa: E731
    assert f(0.5 * (z1 + z2)) <= 0.5 * (f(z1) + f(z2)) + 1e-10


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_subgradient_matches_directional_difference(seed):
    cons, lay, _ = _random_feasible(seed)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(lay.size)
    d = rng.standard_normal(lay.size)
    d /= np.linalg.norm(d)
    f, g = sdp.merit_subgradient(cons, z)
    # restrict to points where the active block has a simple top eigenvalue and a clear winner
    vals = sorted((np.linalg.eigvalsh(c.sign * c.assemble(z))[-1] for c in cons), reverse=True)
    _, k, _ = sdp.merit(cons, z)
    w = np.linalg.eigvalsh(cons[k].sign * cons[k].assemble(z))
    if vals[0] - vals[1] < 1e-2 or w[-1] - w[-2] < 1e-2:
        return
    t = 1e-6
    fd = (sdp.merit(cons, z + t * d)[0] - sdp.merit(cons, z - t * d)[0]) / (2 * t)
    assert fd == pytest.approx(g @ d, abs=1e-5)


def test_adjoint_is_transpose_of_assemble():
    cons, lay, _ = _random_feasible(11)
    c = cons[0]
    rng = np.random.default_rng(0)
    z = rng.standard_normal(lay.size)
    V = rng.standard_normal((c.dim, c.dim))
    V = V + V.T
    lhs = np.sum((c.assemble(z) - c.constant) * V)
    assert lhs == pytest.approx(z @ c.adjoint(V))


def test_clamp_projects_S_and_nu():
    lay = VariableLayout(2, (0, 0))
    z = lay.clamp(lay.flatten(np.diag([-1.0, 2.0]), None, -3.0))
    S, _, nu = lay.unflatten(z)
    assert np.linalg.eigvalsh(S)[0] >= sdp.CLAMP_S * (1 - 1e-9) and nu == sdp.CLAMP_NU
    assert lay.clamps_hold(z)
