"""Certified initial controllers from a Lipschitz estimate.

The stability LMI is solved in (S, Y, nu); the controller is K0 = Y S^-1 with
Lyapunov matrix P = S^-1.  Every returned certificate is re-checked against
the quadratic-constraint stability condition directly, without going
through the LMI.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import NotPositiveDefinite, NotStabilizable, SynthesisFailed
from .sdp import LmiConstraint, SolverOptions, VariableLayout, solve_feasibility, verify
from .sysmodel import SystemModel


def default_alpha_grid():
    return [round(a, 2) for a in np.arange(0.99, 0.4999, -0.01)]


def stability_layout(model: SystemModel, nu_fixed=None):
    return VariableLayout(model.n_x, (model.n_u, model.n_x), has_nu=nu_fixed is None)


def stability_matrix(model: SystemModel, L_hat, alpha, S, Y, nu):
    """4x4 block matrix in (S, Y, nu); rows ordered (x, phi, x+, q).

    The (x+, phi) block is nu*G: this is what the congruence with
    blkdiag(P, I/nu, I, I) needs to reproduce the quadratic-constraint
    condition, so the printed "nu G S" is not used.
    """
    A, B, G, C = model.A, model.B, model.G, model.C_q
    n, p, m = model.n_x, model.n_phi, model.n_q
    AS_BY = A @ S + B @ Y
    Z = np.zeros
    return np.block([
        [-alpha ** 2 * S, Z((n, p)), AS_BY.T, L_hat * S @ C.T],
        [Z((p, n)), -nu * np.eye(p), nu * G.T, Z((p, m))],
        [AS_BY, nu * G, -S, Z((n, m))],
        [L_hat * C @ S, Z((m, p)), Z((m, n)), -nu * np.eye(m)],
    ])


def build_stability_lmi(model: SystemModel, L_hat, alpha, nu_fixed=None):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"decay rate must lie in (0, 1), got {alpha}")
    if L_hat < 0:
        raise ValueError("Lipschitz estimate must be nonnegative")
    layout = stability_layout(model, nu_fixed)
    if nu_fixed is None:
        fn = lambda S, Y, nu: stability_matrix(model, L_hat, alpha, S, Y, nu)  # noqa: E731
    else:
        fn = lambda S, Y, _: stability_matrix(model, L_hat, alpha, S, Y, nu_fixed)  # noqa: E731
    return LmiConstraint.from_function(f"stability(alpha={alpha:g})", layout, fn, "NSD"), layout


def xis_from_bound(ubar, n_u=1):
    """|u_i| <= ubar as the pair of half-spaces (+-e_i / ubar)^T u <= 1."""
    xis = []
    for i in range(n_u):
        e = np.zeros(n_u)
        e[i] = 1.0 / ubar
        xis.extend([e, -e])
    return xis


def build_input_constraint_lmis(xis, layout: VariableLayout):
    """One PSD block [[1, xi^T Y], [Y^T xi, S]] per input half-space xi^T u <= 1."""
    out = []
    for k, xi in enumerate(xis):
        xi = np.asarray(xi, dtype=float).reshape(-1)

        def fn(S, Y, nu, xi=xi):
            row = (xi @ Y)[None, :]
            return np.block([[np.ones((1, 1)), row], [row.T, S]])

        out.append(LmiConstraint.from_function(f"input[{k}]", layout, fn, "PSD"))
    return out


def ball_lmi(layout: VariableLayout, lam):
    """S - lam I >= 0, i.e. E_P contains the ball of radius sqrt(lam)."""
    return LmiConstraint.from_function(
        f"ball(lam={lam:g})", layout, lambda S, Y, nu: S - lam * np.eye(layout.dim_S), "PSD")


@dataclass
class ControllerCertificate:
    K0: np.ndarray
    P: np.ndarray
    nu: float
    alpha: float
    L_hat: float
    constrained: bool = False
    margin: float = float("nan")
    xis: list = field(default_factory=list)
    ball_lambda: float | None = None

    def policy(self, x):
        return self.K0 @ x

    def to_text(self):
        lines = [
            f"K0 = {json.dumps(np.asarray(self.K0).tolist())}",
            f"P = {json.dumps(np.asarray(self.P).tolist())}",
            f"nu = {self.nu!r}",
            f"alpha = {self.alpha!r}",
            f"L_hat = {self.L_hat!r}",
            f"margin = {self.margin!r}",
            f"constrained = {str(self.constrained).lower()}",
        ]
        if self.xis:
            lines.append(f"xis = {json.dumps([np.asarray(x).tolist() for x in self.xis])}")
        if self.ball_lambda is not None:
            lines.append(f"ball_lambda = {self.ball_lambda!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = parse_key_values(text)
        return cls(
            np.array(kv["K0"], dtype=float), np.array(kv["P"], dtype=float), float(kv["nu"]),
            float(kv["alpha"]), float(kv["L_hat"]), bool(kv.get("constrained", False)),
            float(kv.get("margin", float("nan"))),
            [np.array(x, dtype=float) for x in kv.get("xis", [])],
            None if kv.get("ball_lambda") is None else float(kv["ball_lambda"]),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def parse_key_values(text):
    """Flat ``key = value`` lines; values are JSON literals (bare words allowed)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


@dataclass
class EllipsoidDomain:
    P: np.ndarray
    level: float = 1.0

    def contains(self, x, tol=1e-12):
        x = np.asarray(x, dtype=float)
        return bool(x @ self.P @ x <= self.level + tol)

    def boundary_point(self, direction):
        d = np.asarray(direction, dtype=float)
        return d * math.sqrt(self.level / float(d @ self.P @ d))


def ellipsoid_contains(E: EllipsoidDomain, x):
    return E.contains(x)


def theorem1_matrix(model: SystemModel, K0, P, nu, alpha, L):
    """Psi + Gamma^T M Gamma for V = x^T P x and the sector bound |phi| <= L |q|."""
    Acl = model.A + model.B @ np.asarray(K0, dtype=float).reshape(model.n_u, model.n_x)
    G, C = model.G, model.C_q
    Psi = np.block([
        [Acl.T @ P @ Acl - alpha ** 2 * P, Acl.T @ P @ G],
        [G.T @ P @ Acl, G.T @ P @ G],
    ])
    Gamma = np.block([
        [C, np.zeros((model.n_q, model.n_phi))],
        [np.zeros((model.n_phi, model.n_x)), np.eye(model.n_phi)],
    ])
    M = np.block([
        [L ** 2 / nu * np.eye(model.n_q), np.zeros((model.n_q, model.n_phi))],
        [np.zeros((model.n_phi, model.n_q)), -1.0 / nu * np.eye(model.n_phi)],
    ])
    return Psi + Gamma.T @ M @ Gamma


@dataclass
class Theorem1Check:
    ok: bool
    margin: float  # largest eigenvalue; negative means strictly certified

    def __bool__(self):
        return self.ok


def verify_theorem1(model: SystemModel, cert: ControllerCertificate, L=None, tol=0.0):
    L = cert.L_hat if L is None else L
    if not (0.0 < cert.alpha < 1.0 and cert.nu > 0 and np.all(np.isfinite(cert.P))
            and np.all(np.isfinite(cert.K0))):
        return Theorem1Check(False, float("inf"))
    if not linalg.is_positive_definite(cert.P):
        return Theorem1Check(False, float("inf"))
    lam, _ = linalg.max_eig(theorem1_matrix(model, cert.K0, cert.P, cert.nu, cert.alpha, L))
    return Theorem1Check(lam <= tol, lam)


def check_monotonicity(model: SystemModel, cert: ControllerCertificate, L_low):
    """A certificate for L_hat stays valid for any smaller constant L_low."""
    if L_low > cert.L_hat:
        raise ValueError("L_low must not exceed the certificate's L_hat")
    return verify_theorem1(model, cert, L=L_low).ok


def input_constraint_values(cert: ControllerCertificate, xis=None):
    """xi^T K0 P^-1 K0^T xi for every xi; all <= 1 means E_P respects the inputs."""
    xis = cert.xis if xis is None else xis
    Pinv = linalg.inverse(cert.P)
    return np.array([float(xi @ cert.K0 @ Pinv @ cert.K0.T @ xi) for xi in xis])


@dataclass
class SynthesisOptions:
    alphas: list = field(default_factory=default_alpha_grid)
    nu: float | None = None
    xis: list | None = None
    ubar: float | None = None
    maximize_domain: bool = False
    bisection_steps: int = 10
    solver: SolverOptions = field(default_factory=SolverOptions)


def _constraints(model, L_hat, alpha, opts, xis):
    stab, layout = build_stability_lmi(model, L_hat, alpha, opts.nu)
    cons = [stab]
    if xis:
        cons += build_input_constraint_lmis(xis, layout)
    return cons, layout


def _extract(model, layout, z, opts, alpha, L_hat, xis):
    S, Y, nu = layout.unflatten(z)
    nu = opts.nu if opts.nu is not None else nu
    try:
        linalg.cholesky(S)
    except NotPositiveDefinite:
        return None
    P = linalg.inverse(S)
    P = 0.5 * (P + P.T)
    K0 = linalg.solve(S.T, Y.T).T  # Y S^-1
    return ControllerCertificate(K0, P, float(nu), float(alpha), float(L_hat), bool(xis), xis=list(xis or []))


def synthesize(model: SystemModel, L_hat, options: SynthesisOptions | None = None):
    """Scan decay rates (largest first) and return the first certified controller."""
    opts = options or SynthesisOptions()
    if not L_hat > 0:
        raise ValueError("Lipschitz estimate must be positive")
    xis = list(opts.xis or [])
    if opts.ubar is not None:
        xis += xis_from_bound(opts.ubar, model.n_u)
    merits = {}
    for alpha in opts.alphas:
        cons, layout = _constraints(model, L_hat, alpha, opts, xis)
        res = solve_feasibility(cons, layout, opts.solver)
        merits[alpha] = res.merit
        if not res.feasible:
            continue
        if not verify(cons, res.z, res.eps, layout).certified:
            continue
        z = res.z
        ball = None
        if opts.maximize_domain:
            z, ball = _maximize_ball(cons, layout, z, res.eps, opts)
        cert = _extract(model, layout, z, opts, alpha, L_hat, xis)
        if cert is None:
            continue
        chk = verify_theorem1(model, cert)
        if not chk.ok:
            continue
        if xis and np.any(input_constraint_values(cert) > 1.0 + 1e-9):
            continue
        cert.margin = chk.margin
        cert.ball_lambda = ball
        return cert
    raise SynthesisFailed(
        f"no decay rate in [{min(opts.alphas):g}, {max(opts.alphas):g}] gave a certified controller "
        f"for L_hat={L_hat:g}", merits)


def _maximize_ball(cons, layout, z, eps, opts):
    """Bisect the largest lam with S >= lam I still feasible."""
    S, _, _ = layout.unflatten(z)
    lo = float(linalg.sym_eig(S).values[0])
    best_z = z


    def feasible(lam, z0):
        extra = cons + [ball_lmi(layout, lam)]
        so = SolverOptions(**{**opts.solver.__dict__, "z0": z0, "eps": eps})
        r = solve_feasibility(extra, layout, so)
        if r.feasible and verify(extra, r.z, eps, layout).certified:
            return r.z
        return None

    hi = max(2.0 * lo, 1e-6)
    for _ in range(30):
        zz = feasible(hi, best_z)
        if zz is None:
            break
        lo, best_z = hi, zz
        hi *= 2.0
    else:
        return best_z, lo
    for _ in range(opts.bisection_steps):
        mid = 0.5 * (lo + hi)
        zz = feasible(mid, best_z)
        if zz is None:
            hi = mid
        else:
            lo, best_z = mid, zz
    return best_z, lo


def riccati_lqr(A, B, Q, R, tol=1e-10, max_iter=100_000):
    """Discrete-time LQR by fixed-point iteration of the Riccati recursion.

    Returns ``(K, P)`` with u = K x.
    """
    A, B = np.atleast_2d(np.asarray(A, float)), np.atleast_2d(np.asarray(B, float))
    Q, R = np.atleast_2d(np.asarray(Q, float)), np.atleast_2d(np.asarray(R, float))
    P = Q.copy()
    for _ in range(max_iter):
        BtPA = B.T @ P @ A
        Pn = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
        Pn = 0.5 * (Pn + Pn.T)
        if not np.all(np.isfinite(Pn)) or np.linalg.norm(Pn) > 1e12:
            raise NotStabilizable("Riccati iteration diverged; (A, B) is not stabilizable")
        if np.linalg.norm(Pn - P) <= tol:
            P = Pn
            break
        P = Pn
    else:
        raise NotStabilizable(f"Riccati iteration did not converge in {max_iter} iterations")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, P
