"""Accuracy studies: random k-point sets, relative frequency errors, convergence records."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .adapt import AdaptConfig, VertexCache, mark
from .errors import InsufficientDataError, NumericalError
from .hpinterp import assign_degrees, build_interpolant, degrees_from_elements
from .oracle import CountingOracle, eval_many

OMEGA_FLOOR = 1e-12


def random_ibz_points(mesh, count, seed=0):
    """Uniform random points in the live elements of ``mesh`` (volume-weighted)."""
    rng = np.random.default_rng(seed)
    live = mesh.live()
    vol = np.array([abs(mesh.volume(t)) for t in live])
    pick = rng.choice(len(live), size=count, p=vol / vol.sum())
    # uniform barycentrics from the spacings of sorted uniforms
    u = np.sort(rng.random((count, 3)), axis=1)
    w = np.diff(np.concatenate([np.zeros((count, 1)), u, np.ones((count, 1))], axis=1), axis=1)
    P = np.array([mesh.points(t) for t in live])
    return np.einsum("ni,nij->nj", w, P[pick])


def reference_values(oracle, points, bands, workers=1):
    samples = eval_many(oracle, points, max(bands), False, workers)
    return np.array([[s.values[b - 1] for b in bands] for s in samples]).reshape(len(points), len(bands))


def relative_errors(interp, oracle, points, bands, reference=None, workers=1):
    """(error_inf, error_avg, n_excluded) of omega = sqrt(lambda) over ``points``.

    error_inf is the max over bands and points; error_avg the mean over bands
    of each band's max.  Points where the reference omega is below 1e-12 are
    left out and counted.
    """
    bands = tuple(bands)
    lam = reference_values(oracle, points, bands, workers) if reference is None else reference
    approx = interp.evaluate_many(points)[:, [interp.bands.index(b) for b in bands]]
    omega = np.sqrt(np.maximum(lam, 0.0))
    omega_hat = np.sqrt(np.maximum(approx, 0.0))
    ok = omega >= OMEGA_FLOOR
    e = np.where(ok, np.abs(omega - omega_hat) / np.where(ok, omega, 1.0), 0.0)
    per_band = e.max(axis=0)
    return float(per_band.max()), float(per_band.mean()), int((~ok).sum())


def uniform_degrees(mesh, degree=2):
    return degrees_from_elements(mesh, {t: degree for t in mesh.live()})


@dataclass
class ConvergenceRecord:
    method: str
    loops: list = field(default_factory=list)
    N: list = field(default_factory=list)
    error_inf: list = field(default_factory=list)
    error_avg: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    n_tets: list = field(default_factory=list)

    def add(self, loop, N, einf, eavg, sec, n_tets):
        self.loops.append(loop)
        self.N.append(int(N))
        self.error_inf.append(einf)
        self.error_avg.append(eavg)
        self.seconds.append(sec)
        self.n_tets.append(n_tets)

    def rows(self):
        return [[self.method, l, n, ei, ea, s] for l, n, ei, ea, s in
                zip(self.loops, self.N, self.error_inf, self.error_avg, self.seconds)]


RECORD_HEADER = ["method", "loop", "N", "error_inf", "error_avg", "seconds"]


@dataclass
class StudyConfig:
    ell: int = 1
    n_loops: int = 8
    kappa: float = 2.0 * math.sqrt(2.0)
    mu: float = 1.0
    tol2: float = None
    degree_cap: int = 8
    n_eval: int = 2000
    seed: int = 0
    workers: int = 1
    record_timings: bool = False


def convergence_study(mesh_factory, oracle, cfg: StudyConfig, methods=("adaptive", "uniform")):
    """Adaptive and uniform records on the same evaluation set.

    ``mesh_factory()`` must return a fresh initial mesh.  Loop j uses the
    mesh after j refinements: adaptive runs mark with the indicator and assign
    layer-based degrees, uniform runs bisect every element with degree 2.
    """
    oracle = oracle if isinstance(oracle, CountingOracle) else CountingOracle(oracle)
    bands = (cfg.ell, cfg.ell + 1)
    base = mesh_factory()
    points = random_ibz_points(base, cfg.n_eval, cfg.seed)
    reference = reference_values(oracle, points, bands, cfg.workers)
    out = {}
    for method in methods:
        mesh = mesh_factory()
        rec = ConvergenceRecord(method)
        acfg = AdaptConfig(ell=cfg.ell, kappa=cfg.kappa, tol2=cfg.tol2, n_max=cfg.n_loops, workers=cfg.workers)
        cache = VertexCache(oracle, acfg.n_bands, cfg.workers)
        tol2 = acfg.resolved_tol2(mesh)
        for loop in range(cfg.n_loops + 1):
            t0 = time.perf_counter()
            if method == "adaptive":
                cache.extend(mesh)
                marked, flagged = mark(mesh, cache, acfg, tol2)
                degrees = assign_degrees(mesh, flagged, cfg.mu, cfg.degree_cap)
            else:
                marked = mesh.live()
                degrees = uniform_degrees(mesh, 2)
            interp = build_interpolant(mesh, degrees, oracle, bands, cfg.workers)
            einf, eavg, _ = relative_errors(interp, oracle, points, bands, reference)
            sec = time.perf_counter() - t0 if cfg.record_timings else 0.0
            rec.add(loop, interp.n_points, einf, eavg, sec, mesh.n_live)
            if loop < cfg.n_loops:
                mesh.refine(marked)
        out[method] = rec
    return out


def slope_fit(N, errors):
    """Least-squares slope of log(error) against log(N) over the last ceil(half) of the entries."""
    N = np.asarray(N, float)
    e = np.asarray(errors, float)
    if len(N) < 4:
        raise InsufficientDataError(f"slope fit needs at least 4 loops, got {len(N)}")
    m = math.ceil(len(N) / 2)
    x, y = N[-m:], e[-m:]
    if np.any(x <= 0) or np.any(y <= 0):
        raise NumericalError("slope fit needs positive N and errors")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def record_slope(rec: ConvergenceRecord, which="error_avg"):
    return slope_fit(rec.N, getattr(rec, which))
