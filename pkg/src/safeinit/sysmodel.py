"""Uncertain discrete-time system x+ = A x + B u + G phi(C_q x), data, simulation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import linalg
from .errors import EstimationError, ModelError, ParseError, SingularMatrix

DIVERGENCE_NORM = 1e9


def _as_matrix(m, name):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.ndim != 2:
        raise ModelError(f"{name} must be a matrix")
    if not np.all(np.isfinite(m)):
        raise ModelError(f"{name} has non-finite entries")
    return m


def pseudo_inverse_G(G):
    """Left inverse (G^T G)^-1 G^T of a full-column-rank G."""
    G = _as_matrix(G, "G")
    try:
        return linalg.solve(G.T @ G, G.T)
    except SingularMatrix as exc:
        raise ModelError("G is not full column rank") from exc


@dataclass(frozen=True)
class SystemModel:
    """Known part of the plant.

    ``C_q`` may be left ``None`` when the nonlinearity's argument is unknown;
    it then defaults to the identity and can be narrowed with
    :meth:`with_relevance_mask`.
    """

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    C_q: np.ndarray | None = None
    check_binary_G: bool = True

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        G = _as_matrix(self.G, "G")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ModelError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ModelError(f"B has {B.shape[0]} rows, expected {n}")
        if G.shape[0] != n:
            raise ModelError(f"G has {G.shape[0]} rows, expected {n}")
        C_q = np.eye(n) if self.C_q is None else _as_matrix(self.C_q, "C_q")
        if C_q.shape[1] != n:
            raise ModelError(f"C_q has {C_q.shape[1]} columns, expected {n}")
        if self.check_binary_G and not np.all(np.isin(G, (0.0, 1.0))):
            raise ModelError("G entries must be 0 or 1")
        pseudo_inverse_G(G)  # rank check
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "C_q", C_q)

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def n_phi(self):
        return self.G.shape[1]

    @property
    def n_q(self):
        return self.C_q.shape[0]

    @property
    def G_pinv(self):
        return pseudo_inverse_G(self.G)

    def with_relevance_mask(self, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_x,):
            raise ModelError(f"mask must have length {self.n_x}")
        if not mask.any():
            raise ModelError("relevance mask selects no coordinate")
        return SystemModel(self.A, self.B, self.G, np.eye(self.n_x)[mask], self.check_binary_G)

    def step(self, x, u, phi_value):
        return self.A @ x + self.B @ u + self.G @ np.atleast_1d(phi_value)


# q -> phi(q); used only for simulation and ground truth, never for estimation.
NonlinearOracle = Callable[[np.ndarray], np.ndarray]


def zero_oracle(n_phi=1):
    return lambda q: np.zeros(n_phi)


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    x_plus: np.ndarray


@dataclass
class PhiSamples:
    q: np.ndarray  # (N, n_q)
    phi: np.ndarray  # (N, n_phi)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.q.ndim == 1:
            self.q = self.q[:, None]
        if self.phi.ndim == 1:
            self.phi = self.phi[:, None]
        if len(self.q) != len(self.phi):
            raise ValueError("q and phi must have equal lengths")

    def __len__(self):
        return len(self.q)

    def component(self, i):
        return PhiSamples(self.q, self.phi[:, i:i + 1])


@dataclass
class Dataset:
    X: np.ndarray  # (N, n_x)
    U: np.ndarray  # (N, n_u)
    X_plus: np.ndarray  # (N, n_x)
    phi_samples: PhiSamples | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.U = np.asarray(self.U, dtype=float).reshape(len(self.X), -1)
        self.X_plus = np.atleast_2d(np.asarray(self.X_plus, dtype=float))
        if not (len(self.X) == len(self.U) == len(self.X_plus)):
            raise ValueError("X, U, X_plus must have the same number of rows")
        if self.X.shape != self.X_plus.shape:
            raise ValueError("X and X_plus must have the same shape")
        for name in ("X", "U", "X_plus"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        rows = np.hstack([self.X, self.U, self.X_plus])
        if len(np.unique(rows, axis=0)) != len(rows):
            raise ValueError("dataset triples must be unique")

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]):
        return cls(
            np.array([t.x for t in transitions]),
            np.array([t.u for t in transitions]),
            np.array([t.x_plus for t in transitions]),
        )

    def __len__(self):
        return len(self.X)

    def transitions(self):
        return [Transition(x, u, xp) for x, u, xp in zip(self.X, self.U, self.X_plus)]

    def to_csv(self, path):
        n_x, n_u = self.X.shape[1], self.U.shape[1]
        header = ([f"x{i + 1}" for i in range(n_x)] + [f"u{i + 1}" for i in range(n_u)]
                  + [f"xp{i + 1}" for i in range(n_x)])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in np.hstack([self.X, self.U, self.X_plus]):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ParseError(f"{path}: empty file", row=0)
        header = [h.strip() for h in rows[0]]
        xs = [h for h in header if h.startswith("x") and not h.startswith("xp")]
        us = [h for h in header if h.startswith("u")]
        xps = [h for h in header if h.startswith("xp")]
        n_x, n_u = len(xs), len(us)
        expected = ([f"x{i + 1}" for i in range(n_x)] + [f"u{i + 1}" for i in range(n_u)]
                    + [f"xp{i + 1}" for i in range(n_x)])
        if n_x == 0 or header != expected or len(xps) != n_x:
            raise ParseError(f"{path}: header must be x1..xn,u1..um,xp1..xpn; got {header}", row=1)
        data = []
        for r, row in enumerate(rows[1:], start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}", row=r)
            vals = []
            for c, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: row {r}, column {c}: not a number: {cell!r}",
                                     row=r, column=c) from None
                if not np.isfinite(v):
                    raise ParseError(f"{path}: row {r}, column {c}: non-finite value", row=r, column=c)
                vals.append(v)
            data.append(vals)
        if not data:
            raise ParseError(f"{path}: no data rows", row=1)
        data = np.array(data)
        try:
            return cls(data[:, :n_x], data[:, n_x:n_x + n_u], data[:, n_x + n_u:])
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from exc


def extract_phi_samples(model: SystemModel, data: Dataset) -> PhiSamples:
    """phi_j = G^+ (x+_j - A x_j - B u_j) and q_j = C_q x_j."""
    if data.X.shape[1] != model.n_x or data.U.shape[1] != model.n_u:
        raise ModelError(
            f"dataset dims (n_x={data.X.shape[1]}, n_u={data.U.shape[1]}) do not match "
            f"model (n_x={model.n_x}, n_u={model.n_u})"
        )
    resid = data.X_plus - data.X @ model.A.T - data.U @ model.B.T
    phi = resid @ model.G_pinv.T
    q = data.X @ model.C_q.T
    samples = PhiSamples(q, phi)
    data.phi_samples = samples
    return samples


def _nn_errors(X, y):
    """Leave-one-out 1-nearest-neighbour absolute regression errors."""
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    return np.abs(y - y[nn])


def detect_relevant_inputs(X, phi, n_shuffles=10, threshold=0.05, seed=0):
    """Boolean mask of state coordinates that phi depends on.

    Stand-in for automatic relevance determination: coordinate i counts as
    relevant when shuffling it raises the mean leave-one-out 1-NN error by
    more than ``threshold`` times the range of phi (the baseline error scale).
    Coordinates are standardized first so that the neighbour metric does not
    favour large-scale states.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(phi, dtype=float).reshape(len(X), -1)[:, 0]
    if len(X) < 20:
        raise EstimationError(f"relevance detection needs at least 20 samples, got {len(X)}")
    spread = np.ptp(y)
    n = X.shape[1]
    if spread <= 1e-12 * (1.0 + np.abs(y).max()):
        return np.zeros(n, dtype=bool)
    std = X.std(axis=0)
    Z = (X - X.mean(axis=0)) / np.where(std > 0, std, 1.0)
    base = _nn_errors(Z, y).mean()
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=bool)
    for i in range(n):
        if std[i] == 0:
            continue
        inc = 0.0
        for _ in range(n_shuffles):
            Zs = Z.copy()
            Zs[:, i] = rng.permutation(Zs[:, i])
            inc += _nn_errors(Zs, y).mean() - base
        mask[i] = inc / n_shuffles > threshold * spread
    return mask


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, n_x), fewer rows when truncated
    inputs: np.ndarray  # (T, n_u)
    diverged: bool = False

    @property
    def steps(self):
        return len(self.inputs)


def simulate_closed_loop(model: SystemModel, oracle, policy, x0, steps) -> Trajectory:
    """Roll out x_{t+1} = A x_t + B u(x_t) + G phi(C_q x_t).

    Divergence (state norm above 1e9, or non-finite) truncates the
    trajectory and sets the flag instead of raising.
    """
    x = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    xs = [x]
    us = []
    diverged = False
    for _ in range(steps):
        u = np.atleast_1d(np.asarray(policy(x), dtype=float))
        x = model.A @ x + model.B @ u + model.G @ np.atleast_1d(oracle(model.C_q @ x))
        us.append(u)
        xs.append(x)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            diverged = True
            break
    return Trajectory(np.array(xs), np.array(us).reshape(len(us), model.n_u), diverged)


def accumulate_cost(traj: Trajectory, cost, gamma=1.0, horizon=None):
    """Discounted partial sum of stage costs along a trajectory."""
    T = traj.steps if horizon is None else min(horizon, traj.steps)
    total = 0.0
    disc = 1.0
    for t in range(T):
        total += disc * cost(traj.states[t], traj.inputs[t])
        disc *= gamma
    return total
