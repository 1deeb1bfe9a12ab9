"""Approximate dynamic programming from a certified initial controller.

Values are linear in a polynomial basis, J(x) = omega^T psi(x).  Policy
evaluation is the stochastic temporal-difference recursion on
phi_k = psi(x_t) - gamma psi(x_t+1); policy improvement is the closed-form
greedy step for costs quadratic in u (or the tanh-saturated step for the
input-constrained cost).  Value iteration fits each sweep by least squares.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import BasisError, DomainError, ImprovementError, RankError, SafeAbort
from .sysmodel import DIVERGENCE_NORM, SystemModel


# ----------------------------------------------------------------------------
# basis


@dataclass(frozen=True)
class Term:
    coef: float
    exps: tuple

    def label(self):
        parts = []
        for i, e in enumerate(self.exps):
            if e == 1:
                parts.append(f"x{i + 1}")
            elif e > 1:
                parts.append(f"x{i + 1}^{e}")
        mono = "*".join(parts) or "1"
        c = Fraction(self.coef).limit_denominator(1000)
        if c == 1:
            return mono
        if c.numerator == 1:
            return f"{mono}/{c.denominator}"
        return f"{float(self.coef):g}*{mono}"


class BasisSet:
    """Ordered monomials c * prod_i x_i^e_i with analytic gradients."""

    def __init__(self, terms):
        terms = [t if isinstance(t, Term) else Term(float(t[0]), tuple(int(e) for e in t[1])) for t in terms]
        if not terms:
            raise BasisError("basis must contain at least one term")
        n = len(terms[0].exps)
        if any(len(t.exps) != n for t in terms):
            raise BasisError("all terms must have the same number of variables")
        if any(min(t.exps) < 0 for t in terms):
            raise BasisError("exponents must be nonnegative")
        self.terms = terms
        self.n_x = n
        self._E = np.array([t.exps for t in terms], dtype=np.int64)  # (n0, n)
        self._c = np.array([t.coef for t in terms], dtype=float)
        self._cols = np.arange(n)

    def __len__(self):
        return len(self.terms)

    @property
    def n0(self):
        return len(self.terms)

    def labels(self):
        return [t.label() for t in self.terms]

    def has_constant(self):
        return bool(np.any(self._E.sum(axis=1) == 0))

    def _power_table(self, X):
        # X (N, n) -> T (N, e_max + 1, n) with T[:, k, i] = x_i^k
        k = np.arange(int(self._E.max()) + 1)
        return X[:, None, :] ** k[None, :, None]

    def __call__(self, x):
        """psi(x); x of shape (n,) -> (n0,), or (N, n) -> (N, n0)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        M = self._power_table(X)[:, self._E, self._cols]  # (N, n0, n)
        out = self._c * np.prod(M, axis=2)
        return out[0] if single else out

    def gradient(self, x):
        """Jacobian d psi / dx of shape (n0, n)."""
        x = np.asarray(x, dtype=float)
        T = self._power_table(x[None, :])[0]
        M = T[self._E, self._cols]  # x_j^e_j
        # products over j != i without division: exclusive prefix times suffix
        ones = np.ones((len(M), 1))
        pre = np.cumprod(np.hstack([ones, M[:, :-1]]), axis=1)
        suf = np.cumprod(np.hstack([ones, M[:, :0:-1]]), axis=1)[:, ::-1]
        lower = T[np.maximum(self._E - 1, 0), self._cols]
        return self._c[:, None] * self._E * lower * pre * suf

    def polynomial(self, omega):
        """omega^T psi as a dict exponent-tuple -> coefficient (zero terms dropped)."""
        poly = {}
        for w, t in zip(omega, self.terms):
            poly[t.exps] = poly.get(t.exps, 0.0) + float(w) * t.coef
        return {k: v for k, v in poly.items() if v != 0.0}

    def index_of(self, exps):
        for k, t in enumerate(self.terms):
            if t.exps == tuple(exps):
                return k
        return None


def _mono(n, **powers):
    e = [0] * n
    for k, v in powers.items():
        e[int(k[1:]) - 1] = v
    return tuple(e)


def pendulum_basis():
    """11-term polynomial basis for the two-state pendulum."""
    m = lambda **p: _mono(2, **p)  # noqa: E731
    return BasisSet([
        (1 / 2, m(x1=2)), (1 / 2, m(x2=2)), (1.0, m(x1=1, x2=1)),
        (1 / 2, m(x1=2, x2=1)), (1 / 2, m(x1=1, x2=2)),
        (1 / 4, m(x1=4)), (1 / 4, m(x2=4)),
        (1 / 3, m(x1=3)), (1 / 3, m(x2=3)),
        (1 / 2, m(x1=2, x2=2)), (1 / 4, m(x1=4, x2=4)),
    ])


def quadratic_basis(n):
    """All n(n+1)/2 quadratic monomials: x_i^2/2 on the diagonal, x_i x_j off it."""
    terms = []
    for i in range(n):
        for j in range(i, n):
            e = [0] * n
            e[i] += 1
            e[j] += 1
            terms.append((0.5 if i == j else 1.0, tuple(e)))
    return BasisSet(terms)


def quadratic_polynomial(P):
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    poly = {}
    for i in range(n):
        for j in range(i, n):
            e = [0] * n
            e[i] += 1
            e[j] += 1
            v = P[i, i] if i == j else P[i, j] + P[j, i]
            if v != 0.0:
                poly[tuple(e)] = v
    return poly


def init_weights_from_P(basis: BasisSet, P):
    """Weights with omega^T psi(x) == x^T P x; non-quadratic weights are zero."""
    P = np.asarray(P, dtype=float)
    n = basis.n_x
    if P.shape != (n, n):
        raise BasisError(f"P has shape {P.shape}, basis has {n} variables")
    omega = np.zeros(basis.n0)
    for i in range(n):
        for j in range(i, n):
            e = [0] * n
            e[i] += 1
            e[j] += 1
            k = basis.index_of(e)
            if k is None:
                name = f"x{i + 1}^2" if i == j else f"x{i + 1}*x{j + 1}"
                raise BasisError(f"basis lacks the quadratic term {name}")
            v = P[i, i] if i == j else P[i, j] + P[j, i]
            omega[k] = v / basis.terms[k].coef
    return omega


@dataclass
class ValueApproximator:
    basis: BasisSet
    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(-1)
        if len(self.omega) != self.basis.n0:
            raise BasisError(f"{len(self.omega)} weights for a basis of {self.basis.n0} terms")

    def value(self, x):
        return self.basis(x) @ self.omega

    def grad(self, x):
        """nabla J(x) = (d psi/dx)^T omega."""
        return self.basis.gradient(x).T @ self.omega


# ----------------------------------------------------------------------------
# costs


def constrained_input_penalty(u, ubar, R):
    """Closed form of 2 int_0^u ubar atanh(v/ubar)^T R dv (exact for diagonal R)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if ubar <= 0:
        raise DomainError("ubar must be positive")
    r = u / ubar
    if np.any(np.abs(r) >= 1.0):
        raise DomainError(f"|u| must be strictly below ubar={ubar}, got {u}")
    if not np.any(u):
        return 0.0
    return float(2.0 * ubar * u @ R @ np.arctanh(r) + ubar ** 2 * np.diag(R) @ np.log1p(-r * r))


def constrained_cost(u, ubar, R, Qx=0.0):
    return float(Qx) + constrained_input_penalty(u, ubar, R)


@dataclass
class CostFunction:
    """Stage cost U(x, u).

    kind ``quadratic``: x^T Q x + u^T R u; ``l1``: ||Q x||_1 + u^T R u;
    ``constrained``: Q(x) + the saturating input penalty with bound ubar,
    where Q(x) = x^T Q x unless ``state_cost`` is given.
    """

    kind: str
    Q: np.ndarray
    R: np.ndarray
    ubar: float | None = None
    state_cost: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("quadratic", "l1", "constrained"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if np.any(np.linalg.eigvalsh(0.5 * (self.R + self.R.T)) <= 0):
            raise ValueError("R must be positive definite")
        if self.kind == "constrained" and not (self.ubar and self.ubar > 0):
            raise ValueError("constrained cost needs ubar > 0")

    def state_part(self, x):
        if self.state_cost is not None:
            return float(self.state_cost(x))
        if self.kind == "l1":
            return float(np.abs(self.Q @ x).sum())
        return float(x @ self.Q @ x)

    def __call__(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.kind == "constrained":
            return constrained_cost(u, self.ubar, self.R, self.state_part(x))
        return self.state_part(x) + float(u @ self.R @ u)


# ----------------------------------------------------------------------------
# single steps


def policy_evaluation_step(approx: ValueApproximator, x_t, x_next, U, gamma, eta, normalized=False, delta=0.0):
    """omega <- omega - eta phi (omega^T phi - U); returns (new omega, |residual|).

    ``normalized`` divides the step by delta + |phi|^2 (normalized LMS;
    delta > 0 keeps the plain step where phi is small).
    """
    phi = approx.basis(x_t) - gamma * approx.basis(x_next)
    resid = float(approx.omega @ phi - U)
    if normalized:
        nn = delta + float(phi @ phi)
        step = eta / nn if nn > 0 else 0.0
    else:
        step = eta
    return approx.omega - step * phi * resid, abs(resid)


@dataclass
class ImprovementResult:
    u: np.ndarray
    converged: bool
    iterations: int
    residual: float


def _improve(formula, x_next_of, n_u, damping=0.5, tol=1e-10, max_iter=100, raise_on_fail=True):
    """Solve u = formula(x_next(u)) by damped fixed-point steps u <- u + d (formula - u).

    The first step uses d = ``damping``; later steps take the secant
    (Barzilai-Borwein) length d = |du|^2 / -<du, dg> of g(u) = formula - u,
    which is exact for affine maps and keeps the iteration convergent when
    the value function is steep along B.  Convergence is judged on the
    undamped residual |g(u)|.
    """
    u = np.zeros(n_u)
    g = formula(x_next_of(u)) - u
    resid = float(np.max(np.abs(g)))
    d = damping
    for it in range(1, max_iter + 1):
        if not np.all(np.isfinite(g)):
            break
        if resid <= tol * (1.0 + np.max(np.abs(u))):
            return ImprovementResult(u, True, it - 1, resid)
        du = d * g
        u = u + du
        g_new = formula(x_next_of(u)) - u
        dg = g_new - g
        curv = -float(du @ dg)
        d = float(du @ du) / curv if curv > 0 else damping
        d = min(max(d, 1e-8), 1e8)
        g = g_new
        resid = float(np.max(np.abs(g)))
    if np.all(np.isfinite(g)) and resid <= tol * (1.0 + np.max(np.abs(u))):
        return ImprovementResult(u, True, max_iter, resid)
    if raise_on_fail:
        raise ImprovementError(f"fixed-point iteration for u did not converge (residual {resid:.3e})",
                               iterations=max_iter, residual=resid)
    return ImprovementResult(u, False, max_iter, resid)


def _nominal_next(model, x_t, phi_hat):
    base = model.A @ x_t
    if phi_hat is not None:
        base = base + model.G @ np.atleast_1d(phi_hat)
    return lambda u: base + model.B @ u


def policy_improvement_unconstrained(approx, model: SystemModel, x_t, R, gamma, phi_hat=None, **fp):
    """u = -(gamma/2) R^-1 B^T nabla J(x_t+1), x_t+1 from the nominal model."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    RinvBt = np.linalg.solve(R, model.B.T)
    formula = lambda xn: -0.5 * gamma * RinvBt @ approx.grad(xn)  # noqa: E731
    return _improve(formula, _nominal_next(model, np.asarray(x_t, float), phi_hat), model.n_u, **fp)


U_INTERIOR = 1.0 - 2e-12  # leaves room for rounding in |u| / ubar <= 1 - 1e-12


def policy_improvement_constrained(approx, model: SystemModel, x_t, R, gamma, ubar, phi_hat=None, **fp):
    """u = -ubar tanh((gamma / 2 ubar) R^-1 B^T nabla J(x_t+1)), kept strictly inside the bound."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    RinvBt = np.linalg.solve(R, model.B.T)

    def formula(xn):
        t = np.tanh(0.5 * gamma / ubar * RinvBt @ approx.grad(xn))
        return -ubar * np.clip(t, -U_INTERIOR, U_INTERIOR)

    res = _improve(formula, _nominal_next(model, np.asarray(x_t, float), phi_hat), model.n_u, **fp)
    res.u = np.clip(res.u, -U_INTERIOR * ubar, U_INTERIOR * ubar)
    return res


# ----------------------------------------------------------------------------
# policies and rollouts


class LinearPolicy:
    def __init__(self, K):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))

    def __call__(self, x, phi_hat=None):
        return self.K @ x


class GreedyPolicy:
    """Greedy policy with respect to a frozen value approximation."""

    def __init__(self, approx, model, cost: CostFunction, gamma, damping=0.5, tol=1e-10, max_iter=100,
                 use_phi_hat=True):
        self.approx = ValueApproximator(approx.basis, approx.omega.copy())
        self.model, self.cost, self.gamma = model, cost, gamma
        self.fp = dict(damping=damping, tol=tol, max_iter=max_iter)
        self.use_phi_hat = use_phi_hat

    def __call__(self, x, phi_hat=None):
        if not self.use_phi_hat:
            phi_hat = None
        if self.cost.kind == "constrained":
            r = policy_improvement_constrained(self.approx, self.model, x, self.cost.R, self.gamma,
                                               self.cost.ubar, phi_hat, **self.fp)
        else:
            r = policy_improvement_unconstrained(self.approx, self.model, x, self.cost.R, self.gamma,
                                                 phi_hat, **self.fp)
        return r.u


@dataclass
class Rollout:
    states: np.ndarray
    inputs: np.ndarray
    costs: np.ndarray
    diverged: bool


def rollout(model: SystemModel, oracle, policy, x0, steps, cost=None):
    """Closed loop on the true plant; the policy sees the previous step's extracted phi."""
    x = np.asarray(x0, dtype=float).copy()
    xs, us, cs = [x], [], []
    phi_hat = None
    Gp = model.G_pinv
    diverged = False
    for _ in range(steps):
        try:
            u = np.atleast_1d(policy(x, phi_hat))
        except ImprovementError:
            # no finite input exists for this state: the loop has left the region the policy can handle
            diverged = True
            break
        xn = model.A @ x + model.B @ u + model.G @ np.atleast_1d(oracle(model.C_q @ x))
        if cost is not None:
            cs.append(cost(x, u))
        us.append(u)
        xs.append(xn)
        if not np.all(np.isfinite(xn)) or np.linalg.norm(xn) > DIVERGENCE_NORM:
            diverged = True
            break
        phi_hat = Gp @ (xn - model.A @ x - model.B @ u)
        x = xn
    return Rollout(np.array(xs), np.array(us).reshape(len(us), model.n_u), np.array(cs), diverged)


def discounted_sum(costs, gamma):
    return float(np.sum(np.asarray(costs) * gamma ** np.arange(len(costs))))


# ----------------------------------------------------------------------------
# learning loops


def unit_ball_states(n, count, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.random(count) ** (1.0 / n)
    return scale * d * r[:, None]


@dataclass
class LearnConfig:
    gamma: float = 0.95
    eta: float = 1e-4
    eta_decay: float | None = None  # eta_k = eta / (1 + k / eta_decay)
    eps_ac: float = 1e-6
    max_iter: int = 50
    sweep_steps: int = 200
    n_starts: int = 1
    eval_epochs: int = 1
    eval_tol: float = 0.0
    evaluation: str = "sgd"  # sgd | nlms | lstsq
    nlms_delta: float = 0.0  # regularizer in the nlms step eta / (delta + |phi|^2)
    probe_count: int = 100
    probe_scale: float = 1.0
    cost_probes: int = 10
    cost_horizon: int = 200
    start_sampler: Callable | None = None  # rng -> x0
    seed: int = 0
    damping: float = 0.5
    fp_tol: float = 1e-10
    fp_max_iter: int = 100
    vi_rank_sweeps: int = 20
    use_phi_hat: bool = True  # greedy step adds the previous step's extracted phi

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.nlms_delta < 0:
            raise ValueError("nlms_delta must be nonnegative")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.evaluation not in ("sgd", "nlms", "lstsq"):
            raise ValueError(f"unknown evaluation mode {self.evaluation!r}")

    def eta_at(self, k):
        return self.eta if not self.eta_decay else self.eta / (1.0 + k / self.eta_decay)


@dataclass
class LearnResult:
    omegas: list
    policy: Callable
    costs: list
    log: list
    converged: bool
    iterations: int
    basis: BasisSet

    @property
    def omega(self):
        return self.omegas[-1]

    def write_log(self, path):
        write_training_log(path, self.log)


def write_training_log(path, rows):
    n0 = len(rows[0]["omega"]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "residual", "value_change", "cost"] + [f"omega_{i + 1}" for i in range(n0)])
        for r in rows:
            w.writerow([r["iter"], repr(r["residual"]), repr(r["value_change"]), repr(r["cost"])]
                       + [repr(float(v)) for v in r["omega"]])


class _Loop:
    """Shared plumbing of PI and VI: probes, sweeps, cost tracking."""

    def __init__(self, model, oracle, cost, config: LearnConfig, basis):
        self.model, self.oracle, self.cost, self.cfg, self.basis = model, oracle, cost, config, basis
        ss = np.random.SeedSequence(config.seed)
        probe_seed, start_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        self.probes = unit_ball_states(model.n_x, config.probe_count, config.probe_scale, probe_seed)
        self.rng = np.random.default_rng(start_seed)

    def greedy(self, omega):
        c = self.cfg
        return GreedyPolicy(ValueApproximator(self.basis, omega), self.model, self.cost, c.gamma,
                            c.damping, c.fp_tol, c.fp_max_iter, c.use_phi_hat)

    def start(self):
        if self.cfg.start_sampler is not None:
            return np.asarray(self.cfg.start_sampler(self.rng), dtype=float)
        return unit_ball_states(self.model.n_x, 1, self.cfg.probe_scale,
                                int(self.rng.integers(2 ** 63)))[0]

    def sweep(self, policy, k):
        """On-policy transitions (x_t, u_t, x_t+1, U_t) from fresh seeded starts."""
        data = []
        per = max(1, self.cfg.sweep_steps // self.cfg.n_starts)
        for _ in range(self.cfg.n_starts):
            r = rollout(self.model, self.oracle, policy, self.start(), per, self.cost)
            if r.diverged:
                raise SafeAbort(f"rollout diverged during sweep {k}", iteration=k)
            for t in range(len(r.inputs)):
                data.append((r.states[t], r.inputs[t], r.states[t + 1], r.costs[t]))
        return data

    def accumulated_cost(self, policy, k):
        total = 0.0
        for x0 in self.probes[:self.cfg.cost_probes]:
            r = rollout(self.model, self.oracle, policy, x0, self.cfg.cost_horizon, self.cost)
            if r.diverged:
                raise SafeAbort(f"probe rollout diverged at iteration {k}", iteration=k)
            total += discounted_sum(r.costs, self.cfg.gamma)
        return total

    def value_change(self, w_new, w_old):
        return float(np.max(np.abs(self.basis(self.probes) @ (w_new - w_old))))


def _initial(cert, basis, omega0):
    if omega0 is not None:
        return np.asarray(omega0, dtype=float).copy()
    return init_weights_from_P(basis, cert.P)


def _evaluate(loop: _Loop, omega, data, k):
    c = loop.cfg
    g = c.gamma
    if c.evaluation == "lstsq":
        Phi = np.array([loop.basis(x) - g * loop.basis(xn) for x, _, xn, _ in data])
        U = np.array([d[3] for d in data])
        w, *_ = np.linalg.lstsq(Phi, U, rcond=None)
        return w, float(np.mean(np.abs(Phi @ omega - U)))
    eta = c.eta_at(k)
    approx = ValueApproximator(loop.basis, omega.copy())
    first = None
    for _ in range(max(1, c.eval_epochs)):
        prev = approx.omega.copy()
        tot = 0.0
        for x, _, xn, U in data:
            approx.omega, r = policy_evaluation_step(approx, x, xn, U, g, eta, c.evaluation == "nlms",
                                                     c.nlms_delta)
            tot += r
        if first is None:
            first = tot / max(len(data), 1)
        if not np.all(np.isfinite(approx.omega)):
            raise SafeAbort(f"value weights became non-finite at iteration {k}", iteration=k)
        if np.max(np.abs(approx.omega - prev)) <= c.eval_tol:
            break
    return approx.omega, first


def run_policy_iteration(model: SystemModel, oracle, cert, cost: CostFunction, config: LearnConfig,
                         basis: BasisSet | None = None, omega0=None, initial_policy=None):
    """Safely initialized policy iteration.

    Starts from u0 = K0 x and omega0 matching x^T P x (or the given
    ``omega0``; ``initial_policy="greedy"`` starts from the greedy policy of
    omega0 instead of K0).  Each iteration evaluates the current policy on an
    on-policy sweep, then improves greedily; stops once the value change on
    the probe set drops below eps_ac.
    """
    basis = basis or quadratic_basis(model.n_x)
    loop = _Loop(model, oracle, cost, config, basis)
    omega = _initial(cert, basis, omega0)
    if initial_policy == "greedy":
        policy = loop.greedy(omega)
    elif initial_policy is None:
        policy = LinearPolicy(cert.K0)
    else:
        policy = initial_policy
    omegas = [omega.copy()]
    costs = [loop.accumulated_cost(policy, 0)]
    log = [dict(iter=0, residual=float("nan"), value_change=float("nan"), cost=costs[0], omega=omega.copy())]
    converged = False
    k = 0
    for k in range(1, config.max_iter + 1):
        data = loop.sweep(policy, k)
        new, resid = _evaluate(loop, omega, data, k)
        change = loop.value_change(new, omega)
        omega = new
        policy = loop.greedy(omega)
        costs.append(loop.accumulated_cost(policy, k))
        omegas.append(omega.copy())
        log.append(dict(iter=k, residual=resid, value_change=change, cost=costs[-1], omega=omega.copy()))
        if change < config.eps_ac:
            converged = True
            break
    return LearnResult(omegas, policy, costs, log, converged, k, basis)


def run_value_iteration(model: SystemModel, oracle, cert, cost: CostFunction, config: LearnConfig,
                        basis: BasisSet | None = None, omega0=None):
    """Safely initialized value iteration.

    J_0 = x^T P x; each sweep fits omega_k+1^T psi(x_t) to U + gamma J_k(x_t+1)
    by least squares.  Sweeps are pooled until the regressor has full rank.
    """
    basis = basis or quadratic_basis(model.n_x)
    loop = _Loop(model, oracle, cost, config, basis)
    omega = _initial(cert, basis, omega0)
    policy = LinearPolicy(cert.K0)
    omegas = [omega.copy()]
    costs = [loop.accumulated_cost(policy, 0)]
    log = [dict(iter=0, residual=float("nan"), value_change=float("nan"), cost=costs[0], omega=omega.copy())]
    converged = False
    k = 0
    for k in range(1, config.max_iter + 1):
        data = []
        for extra in range(config.vi_rank_sweeps):
            data += loop.sweep(policy, k)
            Psi = basis(np.array([d[0] for d in data]))
            rank = np.linalg.matrix_rank(Psi)
            if rank == basis.n0:
                break
        else:
            _, s, vt = np.linalg.svd(Psi, full_matrices=True)
            null = vt[rank:]
            weight = np.abs(null).max(axis=0)
            names = [basis.labels()[i] for i in np.argsort(-weight)[: basis.n0 - rank]]
            raise RankError(f"regressor rank {rank} < {basis.n0} after {config.vi_rank_sweeps} sweeps",
                            deficient_terms=names)
        Xn = np.array([d[2] for d in data])
        U = np.array([d[3] for d in data])
        target = U + config.gamma * basis(Xn) @ omega
        new, *_ = np.linalg.lstsq(Psi, target, rcond=None)
        resid = float(np.mean(np.abs(Psi @ omega - target)))
        change = loop.value_change(new, omega)
        omega = new
        policy = loop.greedy(omega)
        costs.append(loop.accumulated_cost(policy, k))
        omegas.append(omega.copy())
        log.append(dict(iter=k, residual=resid, value_change=change, cost=costs[-1], omega=omega.copy()))
        if change < config.eps_ac:
            converged = True
            break
    return LearnResult(omegas, policy, costs, log, converged, k, basis)


# ----------------------------------------------------------------------------
# admissibility


@dataclass
class AdmissibilityVerdict:
    x0: np.ndarray
    admissible: bool
    diverged: bool
    decay_rate: float
    total_cost: float
    tail_ratio: float
    steps_to_zero: int | None


@dataclass
class AdmissibilityReport:
    verdicts: list

    @property
    def all_admissible(self):
        return all(v.admissible for v in self.verdicts)

    @property
    def fraction(self):
        return float(np.mean([v.admissible for v in self.verdicts])) if self.verdicts else 0.0


def admissibility_check(model, oracle, policy, cost, gamma, x0s, horizon=500, tail_frac=0.1, tail_tol=1e-8):
    """Per-x0 verdict: finite decaying envelope and a converged discounted cost sum."""
    verdicts = []
    for x0 in np.atleast_2d(np.asarray(x0s, dtype=float)):
        pol = policy if _takes_phi(policy) else (lambda x, _p=None, f=policy: f(x))
        r = rollout(model, oracle, pol, x0, horizon, cost)
        if r.diverged:
            verdicts.append(AdmissibilityVerdict(x0, False, True, math.inf, math.inf, math.inf, None))
            continue
        norms = np.linalg.norm(r.states, axis=1)
        scale = max(norms[0], 1.0)
        zero = np.nonzero(norms <= 1e-12 * scale)[0]
        steps_to_zero = int(zero[0]) if len(zero) else None
        keep = norms > 1e-12 * scale
        t = np.arange(len(norms))[keep]
        if len(t) >= 2:
            slope = np.polyfit(t, np.log(norms[keep]), 1)[0]
            rate = float(math.exp(slope))
        else:
            rate = 0.0
        terms = np.asarray(r.costs) * gamma ** np.arange(len(r.costs))
        total = float(terms.sum())
        n_tail = max(1, int(tail_frac * len(terms)))
        tail = float(np.abs(terms[-n_tail:]).sum())
        ratio = tail / total if total > 0 else 0.0
        ok = (rate < 1.0 or steps_to_zero is not None) and ratio <= tail_tol
        verdicts.append(AdmissibilityVerdict(x0, bool(ok), False, rate, total, ratio, steps_to_zero))
    return AdmissibilityReport(verdicts)


def _takes_phi(policy):
    return isinstance(policy, (LinearPolicy, GreedyPolicy))
