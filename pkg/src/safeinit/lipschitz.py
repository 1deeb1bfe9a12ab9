"""Kernelized Lipschitz learning.

Pairwise difference quotients of the sampled nonlinearity underestimate its
Lipschitz constant; their density is estimated with a KDE and the constant is
taken as the right end of the density's beta-superlevel set.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfidenceTooHigh, EstimationError
from .sysmodel import PhiSamples

KERNELS = ("gaussian", "epanechnikov")
SUPPORT_MODES = ("real-line", "positive")
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass
class SlopeSamples:
    values: np.ndarray
    n_degenerate: int = 0
    n_pairs_total: int = 0
    pairs: np.ndarray | None = field(default=None, repr=False)  # (n, 2) sample indices

    def __len__(self):
        return len(self.values)


def _pair_indices(N, max_pairs, rng):
    total = N * (N - 1) // 2
    if total <= max_pairs:
        return np.triu_indices(N, k=1)
    # uniform draw of distinct unordered pairs via their linear index
    lin = np.sort(rng.choice(total, size=max_pairs, replace=False))
    # invert k = i*N - i*(i+1)/2 + (j - i - 1)
    i = (N - 2 - np.floor(np.sqrt(-8.0 * lin + 4.0 * N * (N - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    j = (lin + i + 1 - N * (N - 1) // 2 + (N - i) * ((N - i) - 1) // 2).astype(np.int64)
    return i, j


def pairwise_underestimates(samples: PhiSamples, max_pairs=50_000, seed=0, min_dist=1e-12):
    """Difference quotients |phi_j - phi_k| / |q_j - q_k| over sample pairs.

    All unordered pairs are used when there are at most ``max_pairs`` of
    them; otherwise a seeded uniform subsample of pairs is drawn.  Pairs with
    (numerically) coincident q are skipped and counted.
    """
    q, phi = samples.q, samples.phi
    N = len(q)
    if N < 2:
        raise EstimationError("need at least two samples")
    i, j = _pair_indices(N, max_pairs, np.random.default_rng(seed))
    dq = np.linalg.norm(q[i] - q[j], axis=1)
    dphi = np.linalg.norm(phi[i] - phi[j], axis=1)
    ok = dq > min_dist
    if not ok.any():
        raise EstimationError("all sample pairs have coincident arguments")
    pairs = np.column_stack([i, j])[ok]
    return SlopeSamples(dphi[ok] / dq[ok], int((~ok).sum()), len(dq), pairs)


def kernel_fn(name):
    if name == "gaussian":
        return lambda u: np.exp(-0.5 * u * u) / _SQRT_2PI
    if name == "epanechnikov":
        return lambda u: np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    raise ValueError(f"unknown kernel {name!r}; choose from {KERNELS}")


def _kernel_self_convolution(name):
    # (K*K)(t), used by least-squares cross-validation
    if name == "gaussian":
        return lambda t: np.exp(-0.25 * t * t) / (2.0 * math.sqrt(math.pi))

    def epa2(t):
        s = np.abs(t)
        return np.where(s <= 2.0, (3.0 / 160.0) * (2.0 - s) ** 3 * (s * s + 6.0 * s + 4.0), 0.0)

    return epa2


def _kernel_radius(name):
    # beyond this many bandwidths the kernel is zero (or below 1e-18)
    return 1.0 if name == "epanechnikov" else 9.0


@dataclass
class KdeModel:
    kernel: str
    bandwidth: float
    samples: np.ndarray  # raw slope samples
    support_mode: str = "positive"
    _data: np.ndarray = field(init=False, repr=False)
    n_dropped: int = field(init=False, default=0)

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.support_mode not in SUPPORT_MODES:
            raise ValueError(f"unknown support mode {self.support_mode!r}")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        s = np.asarray(self.samples, dtype=float).ravel()
        if len(s) == 0:
            raise EstimationError("empty sample set")
        self.samples = s
        if self.support_mode == "positive":
            pos = s > 0
            self.n_dropped = int((~pos).sum())
            if not pos.any():
                raise EstimationError("positive support mode needs at least one positive sample")
            data = np.log(s[pos])
        else:
            data = s
        self._data = np.sort(data)

    @property
    def n(self):
        return len(self._data)

    def _raw_density(self, y):
        """Density of the working-scale data at points y (1-d)."""
        K = kernel_fn(self.kernel)
        h = self.bandwidth
        data = self._data
        rad = _kernel_radius(self.kernel) * h
        lo = np.searchsorted(data, y - rad, side="left")
        hi = np.searchsorted(data, y + rad, side="right")
        out = np.zeros(len(y))
        # evaluate in chunks of points whose windows are contiguous in the sorted data
        chunk = max(1, int(4_000_000 // max(1, int(np.max(hi - lo, initial=1)))))
        for s in range(0, len(y), chunk):
            yy = y[s:s + chunk]
            a, b = lo[s:s + chunk].min(initial=0), hi[s:s + chunk].max(initial=0)
            if b <= a:
                continue
            u = (yy[:, None] - data[None, a:b]) / h
            out[s:s + chunk] = K(u).sum(axis=1)
        return out / (self.n * h)

    def evaluate(self, ell):
        ell = np.asarray(ell, dtype=float)
        flat = np.atleast_1d(ell).ravel()
        if self.support_mode == "real-line":
            dens = self._raw_density(flat)
        else:
            dens = np.zeros(len(flat))
            pos = flat > 0
            if pos.any():
                dens[pos] = self._raw_density(np.log(flat[pos])) / flat[pos]
        dens = dens.reshape(np.shape(ell))
        return float(dens) if np.ndim(ell) == 0 else dens


def fit_kde(slopes, kernel="gaussian", bandwidth=None, support_mode="positive"):
    values = slopes.values if isinstance(slopes, SlopeSamples) else np.asarray(slopes, dtype=float)
    if bandwidth is None:
        bandwidth, _ = select_bandwidth(values, kernel, support_mode)
    return KdeModel(kernel, float(bandwidth), values, support_mode)


def silverman_bandwidth(data):
    data = np.asarray(data, dtype=float)
    return 1.06 * data.std(ddof=1) * len(data) ** (-0.2)


@dataclass
class BandwidthChoice:
    bandwidth: float
    degenerate: bool = False
    fallback: bool = False
    grid: np.ndarray | None = field(default=None, repr=False)
    scores: np.ndarray | None = field(default=None, repr=False)


def _linear_bin(data, lo, delta, n_bins):
    pos = (data - lo) / delta
    left = np.clip(np.floor(pos).astype(np.int64), 0, n_bins - 2)
    w = pos - left
    counts = np.bincount(left, weights=1.0 - w, minlength=n_bins)
    counts += np.bincount(left + 1, weights=w, minlength=n_bins)
    return counts


def _fft_size(n_bins):
    return 1 << int(math.ceil(math.log2(2 * n_bins)))


def _lag_window(acf, n_bins):
    size = len(acf)
    return np.concatenate([acf[size - n_bins + 1:], acf[:n_bins]])


def _binned_autocorrelation(data, n_bins):
    """Pair-difference histogram of linearly binned data.

    Returns (lags, R) with R[k] ~ #{(i, j): x_i - x_j ~ lag_k}, self pairs
    included, for lags in [-(n_bins-1), n_bins-1] * delta.
    """
    lo, hi = data.min(), data.max()
    delta = (hi - lo) / (n_bins - 1)
    size = _fft_size(n_bins)
    f = np.fft.rfft(_linear_bin(data, lo, delta, n_bins), size)
    R = _lag_window(np.fft.irfft(f * np.conj(f), size), n_bins)
    return np.arange(-(n_bins - 1), n_bins) * delta, R


def lscv_scores(data, kernel, bandwidths, n_bins=1 << 14):
    """Least-squares cross-validation criterion for each bandwidth.

    LSCV(h) = int f_h^2 - (2/n) sum_i f_{h,-i}(x_i), evaluated from the binned
    pair-difference histogram so each bandwidth costs O(n_bins).
    """
    data = np.asarray(data, dtype=float)
    n = len(data)
    K = kernel_fn(kernel)
    K2 = _kernel_self_convolution(kernel)
    lags, R = _binned_autocorrelation(data, n_bins)
    scores = []
    for h in bandwidths:
        t = lags / h
        int_f2 = np.sum(R * K2(t)) / (n * n * h)
        cross = (np.sum(R * K(t)) - n * K(np.array(0.0))) / (n * (n - 1) * h)
        scores.append(int_f2 - 2.0 * cross)
    return np.array(scores)


def lscv_scores_point_out(data, pairs, kernel, bandwidths, n_bins=1 << 12):
    """LSCV where slope r is predicted only from slopes sharing no sample with it.

    Slopes built from a common sample point are strongly dependent, and
    ordinary leave-one-out CV on them picks bandwidths that are far too
    small.  Removing the whole "star" of both endpoints restores an honest
    held-out fit.  The cross term is

        sum_r sum_{s disjoint from r} K = T - sum_p W_p + n K(0)

    with T the all-pairs kernel sum and W_p the sum within the star of
    sample p; both come from binned autocorrelations, so each bandwidth is
    O(n_bins).  The held-out count is averaged over r.
    """
    data = np.asarray(data, dtype=float)
    pairs = np.asarray(pairs, dtype=np.int64)
    n = len(data)
    lo, hi = data.min(), data.max()
    delta = (hi - lo) / (n_bins - 1)
    size = _fft_size(n_bins)
    f = np.fft.rfft(_linear_bin(data, lo, delta, n_bins), size)
    T = _lag_window(np.fft.irfft(f * np.conj(f), size), n_bins)
    owners = np.concatenate([pairs[:, 0], pairs[:, 1]])
    order = np.argsort(owners, kind="stable")
    members = np.concatenate([np.arange(n), np.arange(n)])[order]
    bounds = np.flatnonzero(np.diff(owners[order])) + 1
    power = np.zeros(size // 2 + 1)
    for star in np.split(members, bounds):
        fs = np.fft.rfft(_linear_bin(data[star], lo, delta, n_bins), size)
        power += fs.real ** 2 + fs.imag ** 2
    W = _lag_window(np.fft.irfft(power, size), n_bins)
    deg = np.bincount(pairs.ravel())
    held_out = float(np.mean(n - (deg[pairs[:, 0]] + deg[pairs[:, 1]] - 1)))
    if held_out < 1:
        raise EstimationError("every slope shares a sample with every other; cannot cross-validate")
    K = kernel_fn(kernel)
    K2 = _kernel_self_convolution(kernel)
    k0 = float(K(np.array(0.0)))
    lags = np.arange(-(n_bins - 1), n_bins) * delta
    scores = []
    for h in bandwidths:
        t = lags / h
        int_f2 = np.sum(T * K2(t)) / (n * n * h)
        cross = (np.sum((T - W) * K(t)) + n * k0) / (n * held_out * h)
        scores.append(int_f2 - 2.0 * cross)
    return np.array(scores)


CV_MODES = ("point", "pair")


def select_bandwidth(slopes, kernel="gaussian", support_mode="positive", n_grid=30,
                     span=(0.05, 2.0), cv="point"):
    """LSCV bandwidth over a log grid around Silverman's rule.

    Works on the same scale the KDE uses (log scale in positive mode).
    ``cv="point"`` leaves out every slope that shares a sample with the held
    out one (needs ``slopes.pairs``; plain leave-one-out is used without
    them), ``cv="pair"`` is the textbook leave-one-out over slopes.  Returns
    ``(h, BandwidthChoice)``.  All-equal samples give a tiny fallback
    bandwidth with ``degenerate`` set.
    """
    if cv not in CV_MODES:
        raise ValueError(f"cv must be one of {CV_MODES}, got {cv!r}")
    pairs = slopes.pairs if isinstance(slopes, SlopeSamples) else None
    values = slopes.values if isinstance(slopes, SlopeSamples) else np.asarray(slopes, dtype=float)
    values = values.ravel()
    if support_mode == "positive":
        keep = values > 0
        if not keep.any():
            raise EstimationError("positive support mode needs positive samples")
        data = np.log(values[keep])
        if pairs is not None:
            pairs = pairs[keep]
    else:
        data = values
    if len(data) < 5:
        raise EstimationError(f"bandwidth selection needs at least 5 samples, got {len(data)}")
    if np.ptp(data) <= 1e-12 * (1.0 + np.abs(data).max()):
        h = 1e-3 * (1.0 + abs(float(data[0])))
        warnings.warn("degenerate slope samples; using fallback bandwidth", RuntimeWarning)
        return h, BandwidthChoice(h, degenerate=True, fallback=True)
    h_silver = silverman_bandwidth(data)
    grid = h_silver * np.geomspace(span[0], span[1], n_grid)
    if cv == "point" and pairs is not None:
        scores = lscv_scores_point_out(data, pairs, kernel, grid)
    else:
        scores = lscv_scores(data, kernel, grid)
    if np.ptp(scores) < 1e-12:
        return h_silver, BandwidthChoice(h_silver, fallback=True, grid=grid, scores=scores)
    h = float(grid[int(np.argmin(scores))])
    return h, BandwidthChoice(h, grid=grid, scores=scores)


@dataclass
class SupportEstimate:
    beta: float
    intervals: list  # [(left, right), ...] on the evaluation grid
    L_hat: float
    peak_density: float


def _grid_upper(kde: KdeModel):
    m = float(kde.samples.max())
    if kde.support_mode == "positive":
        return max(m, 1e-12) * 1.5 * math.exp(3.0 * kde.bandwidth)
    return m * 1.5 + 3.0 * kde.bandwidth


def estimate_support(kde: KdeModel, beta, n_grid=4096, n_bisect=60):
    """Plug-in support {l >= 0 : density(l) >= beta}; L_hat is its right end."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    upper = _grid_upper(kde)
    grid = np.linspace(0.0, upper, n_grid)
    dens = kde.evaluate(grid)
    # refine the peak so that beta == max density is handled exactly
    k = int(np.argmax(dens))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, n_grid - 1)]
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    for _ in range(80):
        c, d = b - gr * (b - a), a + gr * (b - a)
        if kde.evaluate(c) >= kde.evaluate(d):
            b = d
        else:
            a = c
    peak_x = 0.5 * (a + b)
    peak = max(float(kde.evaluate(peak_x)), float(dens[k]))
    if peak_x < 0 or float(kde.evaluate(peak_x)) < dens[k]:
        peak_x = grid[k]
    if beta > peak * (1.0 + 1e-12):
        raise ConfidenceTooHigh(f"beta={beta:g} exceeds the peak density {peak:.6g}")
    above = dens >= beta
    if not above.any():
        return SupportEstimate(beta, [(peak_x, peak_x)], float(peak_x), peak)
    # contiguous runs of grid points above beta
    edges = np.diff(above.astype(np.int8))
    starts = list(np.flatnonzero(edges == 1) + 1)
    ends = list(np.flatnonzero(edges == -1))
    if above[0]:
        starts.insert(0, 0)
    if above[-1]:
        ends.append(n_grid - 1)
    intervals = [(float(grid[s]), float(grid[e])) for s, e in zip(starts, ends)]
    last = ends[-1]
    if last == n_grid - 1:
        L_hat = float(grid[-1])
    else:
        lo, hi = grid[last], grid[last + 1]
        for _ in range(n_bisect):
            mid = 0.5 * (lo + hi)
            if kde.evaluate(mid) >= beta:
                lo = mid
            else:
                hi = mid
        L_hat = float(lo)
    intervals[-1] = (intervals[-1][0], L_hat)
    return SupportEstimate(beta, intervals, L_hat, peak)


@dataclass
class LipschitzConfig:
    beta: float = 0.01
    kernel: str = "gaussian"
    bandwidth: float | None = None
    max_pairs: int = 50_000
    support_mode: str = "positive"
    seed: int = 0
    per_component: bool = False
    cv: str = "point"


@dataclass
class LipschitzEstimate:
    L_hat: float
    beta: float
    kernel: str
    bandwidth: float
    n_samples: int
    n_slopes: int
    support_mode: str = "positive"
    n_degenerate: int = 0
    max_slope: float = float("nan")
    components: list = field(default_factory=list)
    kde: KdeModel | None = field(default=None, repr=False)
    support: SupportEstimate | None = field(default=None, repr=False)


def estimate_lipschitz(samples: PhiSamples, config: LipschitzConfig | None = None) -> LipschitzEstimate:
    """Pairwise slopes -> (cross-validated) KDE -> support -> right endpoint.

    With ``per_component`` the pipeline runs on each output of phi separately
    and the component constants are combined as sqrt(sum L_i^2), which bounds
    the Lipschitz constant of the vector map.
    """
    config = config or LipschitzConfig()
    if config.per_component and samples.phi.shape[1] > 1:
        parts = [estimate_lipschitz(samples.component(i), replace(config, per_component=False))
                 for i in range(samples.phi.shape[1])]
        L = math.sqrt(sum(p.L_hat ** 2 for p in parts))
        return LipschitzEstimate(L, config.beta, config.kernel,
                                 float(np.mean([p.bandwidth for p in parts])), len(samples),
                                 sum(p.n_slopes for p in parts), config.support_mode,
                                 sum(p.n_degenerate for p in parts),
                                 math.sqrt(sum(p.max_slope ** 2 for p in parts)), parts)
    slopes = pairwise_underestimates(samples, config.max_pairs, config.seed)
    h = config.bandwidth
    if h is None:
        h, _ = select_bandwidth(slopes, config.kernel, config.support_mode, cv=config.cv)
    kde = KdeModel(config.kernel, float(h), slopes.values, config.support_mode)
    sup = estimate_support(kde, config.beta)
    if not sup.L_hat > 0:
        raise EstimationError("estimated Lipschitz constant is not positive")
    return LipschitzEstimate(sup.L_hat, config.beta, config.kernel, float(h), len(samples),
                             len(slopes), config.support_mode, slopes.n_degenerate,
                             float(slopes.values.max()), kde=kde, support=sup)


# --- benchmark functions -------------------------------------------------

@dataclass(frozen=True)
class BenchmarkFunction:
    name: str
    fn: object
    domain: tuple
    L_star: float


BENCHMARKS = {
    "phi1": BenchmarkFunction("phi1", lambda x: np.abs(np.cos(np.pi * x)), (-np.pi, np.pi), 3.141),
    "phi2": BenchmarkFunction("phi2", lambda x: x - x ** 3 / 3.0, (-1.0, 1.0), 1.0),
    "phi3": BenchmarkFunction("phi3", lambda x: np.sin(x) + np.sin(2.0 * x / 3.0), (3.1, 20.4), 1.667),
    "phi5": BenchmarkFunction(
        "phi5", lambda x: np.maximum(1.0 - 3.0 * np.sin(x), np.exp(-np.sin(x))), (-10.0, 10.0), 3.0),
}


def sample_benchmark(fun: BenchmarkFunction, n, rng):
    x = rng.uniform(fun.domain[0], fun.domain[1], size=n)
    return PhiSamples(x[:, None], fun.fn(x)[:, None])


def run_seed(run_index, master_seed):
    return np.random.SeedSequence([master_seed, run_index])


@dataclass
class BenchmarkRow:
    function: str
    n: int
    beta: float
    run: int
    elapsed_s: float
    L_hat: float


def benchmark_runs(fun: BenchmarkFunction, n, beta, runs=100, seed=0, config=None):
    config = config or LipschitzConfig()
    rows = []
    for r in range(runs):
        ss = run_seed(r, seed)
        rng = np.random.default_rng(ss)
        t0 = time.perf_counter()
        samples = sample_benchmark(fun, n, rng)
        est = estimate_lipschitz(samples, replace(config, beta=beta, seed=int(ss.generate_state(1)[0])))
        rows.append(BenchmarkRow(fun.name, n, beta, r, time.perf_counter() - t0, est.L_hat))
    return rows


@dataclass
class BenchmarkSummary:
    function: str
    n: int
    beta: float
    time_mean: float
    time_std: float
    L_mean: float
    L_std: float
    L_star: float
    overestimate_freq: float

    @property
    def all_overestimate(self):
        return self.overestimate_freq == 1.0


def summarize(fun: BenchmarkFunction, rows):
    L = np.array([r.L_hat for r in rows])
    t = np.array([r.elapsed_s for r in rows])
    return BenchmarkSummary(fun.name, rows[0].n, rows[0].beta, float(t.mean()), float(t.std(ddof=1)) if len(t) > 1 else 0.0,
                            float(L.mean()), float(L.std(ddof=1)) if len(L) > 1 else 0.0, fun.L_star,
                            float(np.mean(L > fun.L_star)))


def benchmark_suite(functions=None, ns=(100, 500), betas=(1e-2, 1e-4), runs=100, seed=0,
                    config=None, extra=None):
    """Table-style benchmark: every function x n x beta, ``runs`` seeded runs each.

    ``extra`` may map names to additional :class:`BenchmarkFunction` oracles.
    Returns ``(per_run_rows, summaries)``.
    """
    funcs = dict(BENCHMARKS)
    if extra:
        funcs.update(extra)
    names = list(funcs) if functions in (None, "all") else list(functions)
    all_rows, summaries = [], []
    for name in names:
        fun = funcs[name]
        for n in ns:
            for beta in betas:
                rows = benchmark_runs(fun, n, beta, runs, seed, config)
                all_rows.extend(rows)
                summaries.append(summarize(fun, rows))
    return all_rows, summaries


def convergence_check(oracle, domain, n_grid=(50, 100, 200, 400, 800), runs=50, seed=0, L_star=None):
    """Median max pairwise slope versus sample count.

    Returns a dict with the medians, whether they are nondecreasing in n and
    (when ``L_star`` is given) the gaps ``L_star - median``.
    """
    medians = []
    for n in n_grid:
        maxima = []
        for r in range(runs):
            rng = np.random.default_rng(run_seed(r, seed + n))
            x = rng.uniform(domain[0], domain[1], size=n)
            s = pairwise_underestimates(PhiSamples(x[:, None], oracle(x)[:, None]), max_pairs=10 ** 9)
            maxima.append(s.values.max())
        medians.append(float(np.median(maxima)))
    medians = np.array(medians)
    report = {"n": list(n_grid), "median_max_slope": medians,
              "nondecreasing": bool(np.all(np.diff(medians) >= -1e-12))}
    if L_star is not None:
        report["gap"] = L_star - medians
        report["below"] = bool(np.all(medians <= L_star + 1e-12))
    return report
