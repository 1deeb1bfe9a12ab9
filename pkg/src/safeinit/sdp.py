"""LMI feasibility over a structured variable z = (S symmetric, Y rectangular, nu scalar).

Constraints are affine maps z -> M(z) required to be negative (NSD) or
positive (PSD) semidefinite with a strict margin.  Feasibility is sought by
minimizing the convex merit

    f(z) = max_c lambda_max(s_c M_c(z)),   s_c = +1 (NSD), -1 (PSD)

with a subgradient method: the subgradient of lambda_max at an affine point is
the adjoint of the map applied to v v^T, v a unit top eigenvector.  Two step
rules are available.  ``"ralg"`` (default) is Shor's space-dilation method:
subgradients are taken in a metric stretched along successive subgradient
differences, with an adaptive line search along each direction; it copes
with the badly scaled blocks that appear when B is small.  ``"polyak"`` uses
plain diagonally preconditioned steps of Polyak length toward an adaptively
lowered target.  Hard clamps S >= 1e-8 I and nu >= 1e-8 are restored by
projection after every step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg

CLAMP_S = 1e-8
CLAMP_NU = 1e-8


@dataclass(frozen=True)
class VariableLayout:
    dim_S: int
    shape_Y: tuple = (0, 0)
    has_nu: bool = True

    @property
    def n_S(self):
        return self.dim_S * (self.dim_S + 1) // 2

    @property
    def n_Y(self):
        return int(self.shape_Y[0] * self.shape_Y[1])

    @property
    def size(self):
        return self.n_S + self.n_Y + int(self.has_nu)

    def _tril(self):
        return np.tril_indices(self.dim_S)

    def flatten(self, S=None, Y=None, nu=None):
        z = np.zeros(self.size)
        if self.dim_S:
            S = np.asarray(S, dtype=float)
            z[:self.n_S] = (0.5 * (S + S.T))[self._tril()]
        if self.n_Y:
            z[self.n_S:self.n_S + self.n_Y] = np.asarray(Y, dtype=float).reshape(self.shape_Y).ravel()
        if self.has_nu:
            z[-1] = float(nu)
        return z

    def unflatten(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got shape {z.shape}")
        S = np.zeros((self.dim_S, self.dim_S))
        if self.dim_S:
            S[self._tril()] = z[:self.n_S]
            S = S + np.tril(S, -1).T
        Y = z[self.n_S:self.n_S + self.n_Y].reshape(self.shape_Y)
        nu = float(z[-1]) if self.has_nu else None
        return S, Y, nu

    def initial_point(self, rng=None, noise=1e-3):
        z = self.flatten(np.eye(self.dim_S), np.zeros(self.shape_Y), 1.0)
        if rng is not None and noise:
            z = z + noise * rng.standard_normal(self.size)
        return z

    def clamp(self, z):
        z = np.array(z, dtype=float)
        if self.dim_S:
            S, _, _ = self.unflatten(z)
            d = linalg.sym_eig(S)
            if d.values[0] < CLAMP_S:
                S = (d.vectors * np.maximum(d.values, CLAMP_S)) @ d.vectors.T
                z[:self.n_S] = (0.5 * (S + S.T))[self._tril()]
        if self.has_nu and z[-1] < CLAMP_NU:
            z[-1] = CLAMP_NU
        return z

    def clamps_hold(self, z, tol=0.0):
        S, _, nu = self.unflatten(z)
        ok = True
        if self.dim_S:
            ok &= linalg.sym_eig(S).values[0] >= CLAMP_S * (1.0 - 1e-6) - tol
        if self.has_nu:
            ok &= nu >= CLAMP_NU - tol
        return bool(ok)


@dataclass
class LmiConstraint:
    """Affine matrix map M(z) = C0 + sum_i z_i C_i with a definiteness sense."""

    name: str
    constant: np.ndarray  # (d, d)
    coeffs: np.ndarray  # (N, d, d)
    sense: str = "NSD"

    def __post_init__(self):
        if self.sense not in ("NSD", "PSD"):
            raise ValueError(f"sense must be NSD or PSD, got {self.sense!r}")
        self.constant = np.asarray(self.constant, dtype=float)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        d = self.constant.shape[0]
        if self.constant.shape != (d, d) or self.coeffs.shape[1:] != (d, d):
            raise ValueError("inconsistent block shapes")
        self._flat = self.coeffs.reshape(len(self.coeffs), d * d)

    @property
    def dim(self):
        return self.constant.shape[0]

    @property
    def sign(self):
        return 1.0 if self.sense == "NSD" else -1.0

    @classmethod
    def from_function(cls, name, layout: VariableLayout, fn, sense="NSD"):
        """Build from a callable fn(S, Y, nu) -> matrix that is affine in its arguments."""
        def at(z):
            m = np.asarray(fn(*layout.unflatten(z)), dtype=float)
            return 0.5 * (m + m.T)

        base = at(np.zeros(layout.size))
        coeffs = np.empty((layout.size,) + base.shape)
        for i in range(layout.size):
            e = np.zeros(layout.size)
            e[i] = 1.0
            coeffs[i] = at(e) - base
        return cls(name, base, coeffs, sense)

    def assemble(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (len(self.coeffs),):
            raise ValueError(f"{self.name}: expected z of length {len(self.coeffs)}, got {z.shape}")
        m = self.constant + (z @ self._flat).reshape(self.constant.shape)
        return 0.5 * (m + m.T)

    def adjoint(self, V):
        """<C_i, V> for every coordinate i."""
        return self._flat @ np.asarray(V, dtype=float).ravel()

    def coeff_norms(self):
        return np.sqrt(np.sum(self._flat ** 2, axis=1))


def default_eps(constraints, rel=1e-6):
    return rel * (1.0 + max(np.linalg.norm(c.constant) for c in constraints))


def merit(constraints, z):
    """(f(z), index of the active constraint, top eigenvector of s*M)."""
    best = (-np.inf, -1, None)
    for k, c in enumerate(constraints):
        lam, v = linalg.max_eig(c.sign * c.assemble(z))
        if lam > best[0]:
            best = (lam, k, v)
    return best


def merit_subgradient(constraints, z):
    f, k, v = merit(constraints, z)
    c = constraints[k]
    return f, c.sign * c.adjoint(np.outer(v, v))


@dataclass
class SolverOptions:
    eps: float | None = None
    max_iter: int = 20_000
    seed: int = 0
    stall_iters: int = 500
    stall_rtol: float = 1e-10
    precondition: bool = True
    z0: np.ndarray | None = None
    init_noise: float = 1e-3
    method: str = "ralg"  # ralg | polyak
    dilation: float = 3.0
    restarts: int = 5  # r-algorithm restarts from the best point after the metric collapses


@dataclass
class FeasibilityResult:
    status: str  # "feasible" | "infeasible-suspected" | "iteration-cap"
    z: np.ndarray
    extreme_eigs: dict
    iterations: int
    merit: float
    eps: float
    history: list = field(default_factory=list, repr=False)

    @property
    def feasible(self):
        return self.status == "feasible"


def extreme_eigenvalues(constraints, z, method="lapack"):
    """lambda_max for NSD constraints, lambda_min for PSD constraints."""
    out = {}
    for c in constraints:
        w = linalg.sym_eig(c.assemble(z), method).values
        out[c.name] = float(w[-1] if c.sense == "NSD" else w[0])
    return out


def solve_feasibility(constraints, layout: VariableLayout, options: SolverOptions | None = None):
    options = options or SolverOptions()
    if not constraints:
        raise ValueError("need at least one constraint")
    for c in constraints:
        if len(c.coeffs) != layout.size:
            raise ValueError(f"{c.name}: built for {len(c.coeffs)} variables, layout has {layout.size}")
    if options.method not in ("ralg", "polyak"):
        raise ValueError(f"unknown solver method {options.method!r}")
    eps = default_eps(constraints) if options.eps is None else float(options.eps)
    rng = np.random.default_rng(options.seed)
    z = layout.initial_point(rng, options.init_noise) if options.z0 is None else np.array(options.z0, float)
    z = layout.clamp(z)
    run = _run_ralg if options.method == "ralg" else _run_polyak
    status, z_best, f_best, it, history = run(constraints, layout, z, eps, options)
    return FeasibilityResult(status, z_best, extreme_eigenvalues(constraints, z_best), it,
                             float(f_best), eps, history)


class _Tracker:
    """Best point so far plus the stagnation rule for infeasibility."""

    def __init__(self, z, f, options):
        self.z_best, self.f_best = z.copy(), f
        self.last = f
        self.since = 0
        self.opts = options

    def update(self, z, f):
        if f < self.f_best:
            self.f_best, self.z_best = f, z.copy()
        if self.last - self.f_best > self.opts.stall_rtol * (1.0 + abs(self.f_best)):
            self.last = self.f_best
            self.since = 0
        else:
            self.since += 1
        return self.since >= self.opts.stall_iters and self.f_best > 0


def _preconditioner(constraints, layout, on):
    if not on:
        return np.ones(layout.size)
    sq = sum(c.coeff_norms() ** 2 for c in constraints)
    D = 1.0 / np.where(sq > 0, sq, 1.0)
    return D / D.max()


def _run_polyak(constraints, layout, z, eps, options):
    D = _preconditioner(constraints, layout, options.precondition)
    f, g = merit_subgradient(constraints, z)
    tr = _Tracker(z, f, options)
    delta = max(abs(f), eps, 1e-3)
    history = [f]
    for it in range(1, options.max_iter + 1):
        if tr.f_best <= -eps:
            return "feasible", tr.z_best, tr.f_best, it - 1, history
        gDg = float(g @ (D * g))
        if gDg <= 0.0:
            # zero subgradient: z minimizes f
            return ("infeasible-suspected" if tr.f_best > 0 else "iteration-cap"), tr.z_best, tr.f_best, it, history
        target = min(tr.f_best - delta, -2.0 * eps)
        z = layout.clamp(z - (f - target) / gDg * D * g)
        f, g = merit_subgradient(constraints, z)
        history.append(f)
        if f <= target + 0.5 * (tr.f_best - target):
            delta *= 1.5
        else:
            delta = max(0.7 * delta, 1e-300)
        if tr.update(z, f):
            return "infeasible-suspected", tr.z_best, tr.f_best, it, history
    status = "feasible" if tr.f_best <= -eps else "iteration-cap"
    return status, tr.z_best, tr.f_best, options.max_iter, history


def _run_ralg(constraints, layout, z, eps, options, q1=1.0, q2=1.1, nh=3, max_ls=500):
    """Shor's r-algorithm with the adaptive step of Stetsyuk's ralgb5.

    Every merit evaluation counts as one iteration.  When the space metric
    collapses or the merit stalls, the method restarts from the best point
    with a fresh metric (at most ``options.restarts`` times) before giving up.
    """
    B0 = np.diag(np.sqrt(_preconditioner(constraints, layout, options.precondition)))
    f, g = merit_subgradient(constraints, z)
    tr = _Tracker(z, f, options)
    history = [f]
    it = 0
    restarts = 0

    def fresh(z0):
        f0, g0 = merit_subgradient(constraints, z0)
        return z0.copy(), f0, g0, B0.copy(), 0.1 * max(1.0, np.linalg.norm(z0))

    z, f, g, Bm, h = fresh(z)
    shrink = 1.0 / options.dilation - 1.0
    while it < options.max_iter:
        if tr.f_best <= -eps:
            return "feasible", tr.z_best, tr.f_best, it, history
        gt = Bm.T @ g
        ng = np.linalg.norm(gt)
        if ng <= 1e-300:
            return ("infeasible-suspected" if tr.f_best > 0 else "iteration-cap"), tr.z_best, tr.f_best, it, history
        dz = Bm @ (gt / ng)
        ls = 0
        g1 = g
        stuck = False
        while ls < max_ls and it < options.max_iter:
            ls += 1
            it += 1
            z = layout.clamp(z - h * dz)
            f, g1 = merit_subgradient(constraints, z)
            history.append(f)
            if tr.update(z, f):
                stuck = True
                break
            if tr.f_best <= -eps or dz @ g1 < 0.0:
                break
            if ls % nh == 0:
                h *= q2
        if tr.f_best <= -eps:
            continue
        if not stuck:
            if ls == 1:
                h *= q1
            r = Bm.T @ (g1 - g)
            nr = np.linalg.norm(r)
            if nr > 1e-300:
                r /= nr
                Bm = Bm + shrink * np.outer(Bm @ r, r)
            g = g1
            # the metric collapsed onto a point
            stuck = h * np.linalg.norm(dz) <= 1e-15 * (1.0 + np.linalg.norm(z))
        if stuck:
            if restarts >= options.restarts:
                status = "infeasible-suspected" if tr.f_best > 0 else "iteration-cap"
                return status, tr.z_best, tr.f_best, it, history
            restarts += 1
            tr.since = 0
            z, f, g, Bm, h = fresh(tr.z_best)
    status = "feasible" if tr.f_best <= -eps else "iteration-cap"
    return status, tr.z_best, tr.f_best, it, history


@dataclass
class Certification:
    certified: bool
    extreme_eigs: dict
    failing: list
    clamps_ok: bool
    eps: float


def verify(constraints, z, eps, layout: VariableLayout | None = None, method=None):
    """Independent eigenvalue check of every constraint at z.

    NSD constraints need lambda_max <= -eps/2, PSD ones lambda_min >= eps/2,
    and the S / nu clamps must hold.  Small blocks use the Jacobi solver so
    the certificate does not share an eigensolver with the search.
    """
    eigs, failing = {}, []
    for c in constraints:
        m = c.assemble(z)
        meth = method or ("jacobi" if c.dim <= 16 else "lapack")
        w = linalg.sym_eig(m, meth).values
        if c.sense == "NSD":
            eigs[c.name] = float(w[-1])
            if not w[-1] <= -eps / 2.0:
                failing.append(c.name)
        else:
            eigs[c.name] = float(w[0])
            if not w[0] >= eps / 2.0:
                failing.append(c.name)
    clamps_ok = True if layout is None else layout.clamps_hold(z)
    return Certification(not failing and clamps_ok, eigs, failing, clamps_ok, eps)
