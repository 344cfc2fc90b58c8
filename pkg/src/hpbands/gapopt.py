"""Normalized band-gap objective and a Bayesian optimization loop over design parameters.

The surrogate is a Gaussian process with constant mean and a squared
exponential kernel with one length-scale per dimension, fitted by maximizing
the log marginal likelihood.  New designs maximize expected improvement.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from .errors import AdmissibilityError, ConfigError, HPBandsError, NumericalError

N_EVAL_DEFAULT = 2000
XI_DEFAULT = 0.01
N_CANDIDATES = 4096
N_POLISH = 8
N_RESTARTS = 5
JITTER_START = 1e-8
JITTER_MAX = 1e-4


# ---------------------------------------------------------------- objective


@dataclass
class GapResult:
    min_upper: float
    max_lower: float
    phi: float
    n_eval: int
    source: str
    ell: int = 1
    n_oracle_calls: int = 0

    @property
    def has_gap(self):
        return self.phi > 0


def gap_phi(min_upper, max_lower):
    """(min upper - max lower) divided by their mean."""
    mid = 0.5 * (min_upper + max_lower)
    if not mid > 0:
        raise NumericalError("band extrema must have a positive mean")
    return (min_upper - max_lower) / mid


def sobol(d, n, seed):
    """Scrambled Sobol points; counts that are not powers of two are fine for our use."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return qmc.Sobol(d=d, scramble=True, seed=seed).random(n)


def quasi_random_points(mesh, count, seed=0):
    """Scrambled Sobol points spread over the live elements in proportion to volume."""
    if count <= 0:
        return np.zeros((0, 3))
    live = mesh.live()
    vol = np.array([abs(mesh.volume(t)) for t in live])
    cum = np.cumsum(vol) / vol.sum()
    u = sobol(4, count, seed)
    pick = np.minimum(np.searchsorted(cum, u[:, 0], side="right"), len(live) - 1)
    s = np.sort(u[:, 1:], axis=1)
    w = np.diff(np.concatenate([np.zeros((count, 1)), s, np.ones((count, 1))], axis=1), axis=1)
    P = np.array([mesh.points(t) for t in live])
    return np.einsum("ni,nij->nj", w, P[pick])


def _band_table(source, bands, points=None, n_eval=N_EVAL_DEFAULT, seed=0, workers=1):
    """Band values (P, len(bands)) over the evaluation set, and the source label."""
    from .hpinterp import Interpolant
    from .oracle import eval_many

    if isinstance(source, Interpolant):
        missing = [b for b in bands if b not in source.bands]
        if missing:
            raise ConfigError(f"interpolant does not reconstruct bands {missing}")
        cols = [source.bands.index(b) for b in bands]
        extra = quasi_random_points(source.mesh, n_eval, seed) if points is None else np.asarray(points, float)
        table = source.values[:, cols]
        if len(extra):
            table = np.vstack([table, source.evaluate_many(extra)[:, cols]])
        return table, "interpolant"
    if points is None:
        raise ConfigError("an oracle sweep needs explicit k-points")
    limit = getattr(source, "max_bands", None)
    if limit is not None and max(bands) > limit:
        raise ConfigError(f"band {max(bands)} exceeds the oracle's {limit} bands")
    samples = eval_many(source, np.asarray(points, float).reshape(-1, 3), max(bands), False, workers)
    table = np.array([[s.values[b - 1] for b in bands] for s in samples]).reshape(-1, len(bands))
    return table, "oracle"


def objective_phi(source, ell, points=None, n_eval=N_EVAL_DEFAULT, seed=0, workers=1):
    """Normalized gap between bands ell and ell+1.

    ``source`` is an Interpolant (extrema over its sampling points plus a
    Sobol set of ``n_eval`` points, or ``points`` if given) or an oracle swept
    over ``points``.
    """
    ell = int(ell)
    if ell < 1:
        raise ConfigError("ell must be >= 1")
    table, label = _band_table(source, (ell, ell + 1), points, n_eval, seed, workers)
    lo, hi = float(table[:, 0].max()), float(table[:, 1].min())
    return GapResult(hi, lo, gap_phi(hi, lo), len(table), label, ell)


def multi_from_table(table):
    """(n, GapResult) maximizing the gap between columns n and n+1 (1-based); ties go to the smallest n."""
    table = np.asarray(table, float)
    best = None
    for n in range(1, table.shape[1]):
        lo, hi = float(table[:, n - 1].max()), float(table[:, n].min())
        res = GapResult(hi, lo, gap_phi(hi, lo), len(table), "table", n)
        if best is None or res.phi > best[1].phi:
            best = (n, res)
    return best


def objective_multi(source, L, points=None, n_eval=N_EVAL_DEFAULT, seed=0, workers=1):
    """Best (band index n, GapResult) over consecutive pairs among the first L bands."""
    L = int(L)
    if L < 2:
        raise ConfigError("objective_multi needs L >= 2")
    table, label = _band_table(source, tuple(range(1, L + 1)), points, n_eval, seed, workers)
    n, res = multi_from_table(table)
    res.source = label
    return n, res


# ---------------------------------------------------------------- surrogate


def _cholesky(K):
    # absolute jitter: responses are standardized before fitting
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-12):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K))), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("kernel matrix is not positive definite at the largest jitter")


class GaussianProcess:
    """Constant-mean GP with an ARD squared exponential kernel on inputs scaled to [0, 1]^d."""

    LOG_LS_BOUNDS = (math.log(1e-2), math.log(1e1))
    LOG_SF_BOUNDS = (math.log(1e-3), math.log(1e3))

    def __init__(self, bounds):
        self.bounds = np.asarray(bounds, float).reshape(-1, 2)
        if np.any(self.bounds[:, 1] <= self.bounds[:, 0]):
            raise ConfigError("each bound needs low < high")
        self.dim = len(self.bounds)

    def _scale(self, X):
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return (np.asarray(X, float).reshape(-1, self.dim) - lo) / (hi - lo)

    @staticmethod
    def _kernel(A, B, ls, sf2):
        d = (A[:, None, :] - B[None, :, :]) / ls
        return sf2 * np.exp(-0.5 * np.sum(d * d, axis=2))

    def _nll(self, params, X, y):
        ls, sf2 = np.exp(params[:-1]), math.exp(2 * params[-1])
        K = self._kernel(X, X, ls, sf2)
        try:
            C, _ = _cholesky(K)
        except NumericalError:
            return 1e25
        # constant mean by generalized least squares
        one = np.ones(len(y))
        a = np.linalg.solve(C, one)
        b = np.linalg.solve(C, y)
        m = float(a @ b / (a @ a))
        r = b - m * a
        return 0.5 * float(r @ r) + float(np.sum(np.log(np.diag(C)))) + 0.5 * len(y) * math.log(2 * math.pi)

    def fit(self, X, y, seed=0):
        X = np.asarray(X, float).reshape(-1, self.dim)
        y = np.asarray(y, float).ravel()
        if len(X) != len(y):
            raise ConfigError("X and y lengths differ")
        # duplicate inputs are merged with their mean response
        uniq, inv = np.unique(X, axis=0, return_inverse=True)
        inv = np.asarray(inv).ravel()
        ybar = np.bincount(inv, weights=y) / np.bincount(inv)
        if len(uniq) < 2:
            raise ConfigError("the surrogate needs at least two distinct observations")
        self.X = uniq
        self.Z = self._scale(uniq)
        self.y_shift = float(ybar.mean())
        self.y_scale = float(ybar.std()) or 1.0
        self.y = (ybar - self.y_shift) / self.y_scale
        rng = np.random.default_rng(seed)
        lo = np.array([self.LOG_LS_BOUNDS[0]] * self.dim + [self.LOG_SF_BOUNDS[0]])
        hi = np.array([self.LOG_LS_BOUNDS[1]] * self.dim + [self.LOG_SF_BOUNDS[1]])
        starts = [np.array([math.log(0.3)] * self.dim + [0.0])]
        starts += list(rng.uniform(lo, hi, size=(N_RESTARTS, self.dim + 1)))
        best = None
        for x0 in starts:
            res = minimize(self._nll, x0, args=(self.Z, self.y), method="L-BFGS-B", bounds=list(zip(lo, hi)))
            if best is None or res.fun < best.fun:
                best = res
        self.ls = np.exp(best.x[:-1])
        self.sf2 = math.exp(2 * best.x[-1])
        K = self._kernel(self.Z, self.Z, self.ls, self.sf2)
        self.C, self.jitter = _cholesky(K)
        one = np.ones(len(self.y))
        a = np.linalg.solve(self.C, one)
        b = np.linalg.solve(self.C, self.y)
        self.mean = float(a @ b / (a @ a))
        self.alpha = np.linalg.solve(self.C.T, b - self.mean * a)
        return self

    def predict(self, X):
        """Posterior mean and standard deviation in the original units."""
        Z = self._scale(X)
        Ks = self._kernel(Z, self.Z, self.ls, self.sf2)
        # the jitter belongs to the kernel at coincident inputs, so training data are reproduced exactly
        same = np.all(Z[:, None, :] == self.Z[None, :, :], axis=2)
        Ks = Ks + self.jitter * same
        mu = self.mean + Ks @ self.alpha
        v = np.linalg.solve(self.C, Ks.T)
        var = np.maximum(self.sf2 + self.jitter * same.any(axis=1) - np.sum(v * v, axis=0), 0.0)
        return self.y_shift + self.y_scale * mu, self.y_scale * np.sqrt(var)


def gp_fit(X, y, bounds, seed=0):
    return GaussianProcess(bounds).fit(X, y, seed)


def expected_improvement(gp, X, best, xi=XI_DEFAULT):
    """Expected improvement over ``best`` for maximization; zero where the posterior is certain."""
    mu, sd = gp.predict(X)
    imp = mu - best - xi
    out = np.maximum(imp, 0.0)
    ok = sd > 1e-12 * max(1.0, gp.y_scale)
    z = imp[ok] / sd[ok]
    out[ok] = imp[ok] * norm.cdf(z) + sd[ok] * norm.pdf(z)
    return np.maximum(out, 0.0)


def acquisition_ei(gp, theta, best, xi=XI_DEFAULT):
    return float(expected_improvement(gp, np.atleast_2d(theta), best, xi)[0])


def maximize_ei(gp, best, feasible=None, seed=0, xi=XI_DEFAULT, n_candidates=N_CANDIDATES, n_polish=N_POLISH,
                accept=None):
    """Maximizer of EI over admissible points: Sobol candidates, then L-BFGS-B from the top few.

    ``feasible`` is a cheap filter applied to every candidate; ``accept`` is an
    optional costlier check applied in order of decreasing EI to the winners.
    """
    lo, hi = gp.bounds[:, 0], gp.bounds[:, 1]
    cand = qmc.scale(sobol(gp.dim, n_candidates, seed), lo, hi)
    ok = np.array([feasible(c) for c in cand]) if feasible is not None else np.ones(len(cand), bool)
    if not ok.any():
        raise AdmissibilityError("every acquisition candidate is infeasible; widen the parameter bounds")
    cand = cand[ok]
    ei = expected_improvement(gp, cand, best, xi)
    order = np.argsort(-ei, kind="stable")
    pool = [(float(ei[i]), cand[i]) for i in order[:n_polish]]
    for e0, x0 in list(pool):
        res = minimize(lambda x: -acquisition_ei(gp, x, best, xi), x0, method="L-BFGS-B", bounds=list(zip(lo, hi)))
        x = np.clip(res.x, lo, hi)
        if -res.fun > e0 and (feasible is None or feasible(x)):
            pool.append((float(-res.fun), x))
    pool.sort(key=lambda p: -p[0])
    pool += [(float(ei[i]), cand[i]) for i in order[n_polish:]]
    for e, x in pool:
        if accept is None or accept(x):
            return x, e
    raise AdmissibilityError("no acquisition candidate passed the admissibility check; widen the parameter bounds")


# ---------------------------------------------------------------- loop


@dataclass
class TraceEntry:
    iter: int
    theta: tuple
    phi: float
    n_oracle_calls: int = 0
    wall_seconds: float = 0.0


@dataclass
class BOResult:
    best_theta: tuple
    best_phi: float
    trace: list = field(default_factory=list)
    stopped_by_guard: bool = False

    def best_so_far(self):
        return list(np.maximum.accumulate([e.phi for e in self.trace]))

    def rows(self, width=None):
        width = width or max(len(e.theta) for e in self.trace)
        out = []
        for e in self.trace:
            th = list(e.theta) + [""] * (width - len(e.theta))
            out.append([e.iter, *th, e.phi, e.n_oracle_calls, e.wall_seconds])
        return out


def trace_header(width=4):
    return ["iter", *[f"theta_{i + 1}" for i in range(width)], "phi", "n_oracle_calls", "wall_seconds"]


def _unpack(value):
    if isinstance(value, GapResult):
        return float(value.phi), int(value.n_oracle_calls)
    return float(value), 0


def bo_loop(objective, theta0, bounds, n_max=20, seed=0, feasible=None, paper_stopping=False,
            xi=XI_DEFAULT, record_timings=False, on_eval=None, accept=None):
    """Maximize ``objective`` (float or GapResult per theta) starting from ``theta0``.

    Stops after ``n_max`` evaluations.  With ``paper_stopping`` the loop also
    stops at the first new point whose value does not exceed the initial one.
    """
    if int(n_max) < 1:
        raise ConfigError("n_max must be >= 1")
    bounds = np.asarray(bounds, float).reshape(-1, 2)
    theta0 = np.asarray(theta0, float)
    if (feasible is not None and not feasible(theta0)) or (accept is not None and not accept(theta0)):
        raise AdmissibilityError(f"initial design {theta0.tolist()} is not admissible")
    rng = np.random.default_rng(seed)
    X, y, trace = [], [], []
    stopped = False

    def evaluate(theta, it):
        t0 = time.perf_counter()
        phi, calls = _unpack(objective(theta))
        sec = time.perf_counter() - t0 if record_timings else 0.0
        if not math.isfinite(phi):
            raise NumericalError(f"objective returned {phi} at {theta.tolist()}")
        X.append(np.array(theta, float))
        y.append(phi)
        trace.append(TraceEntry(it, tuple(float(v) for v in theta), phi, calls, sec))
        if on_eval is not None:
            on_eval(trace[-1])
        return phi

    phi0 = evaluate(theta0, 1)
    for it in range(2, int(n_max) + 1):
        step_seed = int(rng.integers(2**31))
        if len(np.unique(np.array(X), axis=0)) < 2:
            # one distinct observation: take the first admissible Sobol point
            nxt = _first_feasible(bounds, feasible, accept, step_seed)
        else:
            gp = GaussianProcess(bounds).fit(np.array(X), np.array(y), seed=step_seed)
            nxt, _ = maximize_ei(gp, max(y), feasible, step_seed, xi, accept=accept)
        phi = evaluate(nxt, it)
        if paper_stopping and not phi > phi0:
            stopped = True
            break
    i = int(np.argmax(y))
    return BOResult(tuple(float(v) for v in X[i]), float(y[i]), trace, stopped)


def _first_feasible(bounds, feasible, accept, seed):
    cand = qmc.scale(sobol(len(bounds), 256, seed), bounds[:, 0], bounds[:, 1])
    for c in cand:
        if (feasible is None or feasible(c)) and (accept is None or accept(c)):
            return c
    raise AdmissibilityError("no admissible starting candidate; widen the parameter bounds")


# ---------------------------------------------------------------- test objectives and model pipeline


def synthetic_2d(theta):
    """Smooth two-bump function on [0, 1]^2 with its global maximum near (0.7, 0.3)."""
    x, z = float(theta[0]), float(theta[1])
    return (math.exp(-((x - 0.7) ** 2 + (z - 0.3) ** 2) / 0.05)
            + 0.6 * math.exp(-((x - 0.2) ** 2 + (z - 0.8) ** 2) / 0.02))


SYNTHETIC_BOUNDS = ((0.0, 1.0), (0.0, 1.0))
SYNTHETIC_START = (0.5, 0.5)


def grid_max(fun, bounds, n=101):
    axes = [np.linspace(lo, hi, n) for lo, hi in bounds]
    return max(fun(p) for p in np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(bounds), -1).T)


@dataclass
class ModelObjective:
    """theta (free entries) -> GapResult through adaptive sampling and interpolation."""

    model: int
    ell: int
    free: tuple = (0, 1, 2, 3)
    fixed: tuple = None
    a: float = 1.0
    modes_per_axis: int = 7
    gradient: str = "fd"
    n_max: int = 8
    kappa: float = 2.0 * math.sqrt(2.0)
    mu: float = 1.0
    degree_cap: int = 8
    n_eval: int = N_EVAL_DEFAULT
    seed: int = 0
    workers: int = 1
    domain: str = None

    def __post_init__(self):
        from .geometry import DesignParams

        base = DesignParams.literature(self.model, self.a).theta
        self.fixed = tuple(base) if self.fixed is None else tuple(float(v) for v in self.fixed)
        self.free = tuple(int(i) for i in self.free)
        if self.domain is None:
            self.domain = "ibz_sc_xy_sym" if self.model == 1 else "ibz_sc_full_sym"

    def full_theta(self, x):
        th = list(self.fixed)
        for i, v in zip(self.free, np.atleast_1d(x)):
            th[i] = float(v)
        return tuple(th)

    def start(self):
        return np.array([self.fixed[i] for i in self.free])

    def bounds(self, low=0.02):
        """Box bounds for the free entries (relative to a); the lower end keeps shapes non-degenerate."""
        hi = (0.5, 0.5, 1.0, 1.0) if self.model == 1 else (0.5, 0.5, 0.5, 0.5)
        return np.array([[low * self.a, hi[i] * self.a] for i in self.free])

    def params(self, x):
        from .geometry import DesignParams

        return DesignParams(self.model, self.full_theta(x), self.a)

    def feasible(self, x):
        from .geometry import validate_admissible

        return validate_admissible(self.params(x))

    def cell_ok(self, x):
        from .geometry import build_cell

        if not self.feasible(x):
            return False
        try:
            build_cell(self.params(x))
        except HPBandsError:
            return False
        return True

    def __call__(self, x):
        from .adapt import AdaptConfig, adapt_loop
        from .bzmesh import build_initial_mesh
        from .geometry import build_cell
        from .hpinterp import assign_degrees, build_interpolant
        from .oracle import CountingOracle, make_oracle

        cell = build_cell(self.params(x))
        n_bands = self.ell + 2
        oracle = CountingOracle(make_oracle("pwe", cell, self.modes_per_axis, n_bands, gradient=self.gradient, a=self.a))
        mesh = build_initial_mesh(self.domain, self.a)
        cfg = AdaptConfig(ell=self.ell, kappa=self.kappa, n_max=self.n_max, workers=self.workers)
        res = adapt_loop(mesh, oracle, cfg)
        degrees = assign_degrees(mesh, res.flagged, self.mu, self.degree_cap)
        interp = build_interpolant(mesh, degrees, oracle, (self.ell, self.ell + 1), self.workers)
        out = objective_phi(interp, self.ell, n_eval=self.n_eval, seed=self.seed)
        out.n_oracle_calls = oracle.calls
        return out
