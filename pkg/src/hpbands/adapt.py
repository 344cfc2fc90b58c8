"""Adaptive sampling loop: refine elements whose vertex band spacing is small.

An element T is flagged when the smallest vertex spacing of neighbouring
bands around the target band, eta(T), does not exceed kappa * h_T * C(T),
where C(T) is the largest vertex gradient norm of those bands.  Flagged
elements larger than tol2 are bisected.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, HPBandsError
from .oracle import eval_many

KAPPA_DEFAULT = 2.0 * math.sqrt(2.0)
KAPPA_THEORY = 2.0 * math.sqrt(3.0)


@dataclass
class AdaptConfig:
    ell: int = 1
    kappa: float = KAPPA_DEFAULT
    tol2: float = None
    n_max: int = 8
    workers: int = 1
    record_timings: bool = False

    def __post_init__(self):
        if int(self.ell) < 1:
            raise ConfigError("target band ell must be >= 1")
        if not self.kappa > 0:
            raise ConfigError("kappa must be positive")
        if self.tol2 is not None and not self.tol2 > 0:
            raise ConfigError("tol2 must be positive")
        if int(self.n_max) < 0:
            raise ConfigError("n_max must be >= 0")

    @property
    def q_range(self):
        """Band indices q whose spacing lambda_{q+1} - lambda_q enters the indicator."""
        return range(max(1, self.ell - 1), self.ell + 2)

    @property
    def n_bands(self):
        return self.ell + 2

    def resolved_tol2(self, mesh):
        return self.tol2 if self.tol2 is not None else mesh.h_initial() / 2**5


class VertexCache:
    """Oracle samples per mesh vertex id; each vertex is evaluated once."""

    def __init__(self, oracle, n_bands, workers=1):
        self.oracle = oracle
        self.n_bands = n_bands
        self.workers = workers
        self.samples = {}
        self.calls = 0

    def __contains__(self, v):
        return v in self.samples

    def __getitem__(self, v):
        return self.samples[v]

    def __len__(self):
        return len(self.samples)

    def extend(self, mesh, ids=None):
        ids = mesh.live_vertex_ids() if ids is None else ids
        new = [v for v in ids if v not in self.samples]
        if new:
            V = mesh.vertices[new]
            for v, s in zip(new, eval_many(self.oracle, V, self.n_bands, True, self.workers)):
                self.samples[v] = s
            self.calls += len(new)
        return len(new)

    def arrays(self, n_vertices):
        vals = np.full((n_vertices, self.n_bands), np.nan)
        gnorm = np.full((n_vertices, self.n_bands), np.nan)
        for v, s in self.samples.items():
            vals[v] = s.values[: self.n_bands]
            gnorm[v] = np.linalg.norm(s.gradients[: self.n_bands], axis=1)
        return vals, gnorm


def _require(cache, verts):
    for v in verts:
        if v not in cache:
            raise HPBandsError(f"vertex {v} has no cached band sample")


def indicator(cache, mesh, t, ell):
    verts = mesh.tets[t]
    _require(cache, verts)
    qs = range(max(1, ell - 1), ell + 2)
    return min(abs(cache[v].values[q] - cache[v].values[q - 1]) for v in verts for q in qs)


def gradient_bound(cache, mesh, t, ell):
    verts = mesh.tets[t]
    _require(cache, verts)
    qs = range(max(1, ell - 1), ell + 2)
    return max(float(np.linalg.norm(cache[v].gradients[q - 1])) for v in verts for q in qs)


def local_tolerance(cache, mesh, t, ell, kappa=KAPPA_DEFAULT):
    return kappa * mesh.diameter(t) * gradient_bound(cache, mesh, t, ell)


def element_measures(mesh, cache, cfg):
    """Arrays (live ids, eta, tol1, h) over all live elements."""
    live = np.array(mesh.live(), dtype=int)
    T = np.array([mesh.tets[t] for t in live], dtype=int).reshape(-1, 4)
    _require(cache, np.unique(T))
    vals, gnorm = cache.arrays(mesh.n_vertices)
    q0 = max(1, cfg.ell - 1) - 1
    q1 = cfg.ell + 1
    spacing = np.abs(np.diff(vals[:, q0:q1 + 1], axis=1))
    eta = spacing[T].min(axis=(1, 2))
    cmax = gnorm[:, q0:q1][T].max(axis=(1, 2))
    P = mesh.vertices[T]
    h = np.zeros(len(live))
    for i, j in ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)):
        h = np.maximum(h, np.linalg.norm(P[:, i] - P[:, j], axis=1))
    return live, eta, cfg.kappa * h * cmax, h


def mark(mesh, cache, cfg, tol2=None):
    """(marked, flagged) live element ids.

    flagged: eta <= tol1.  marked: flagged and h_T >= tol2.
    """
    tol2 = cfg.resolved_tol2(mesh) if tol2 is None else tol2
    live, eta, tol1, h = element_measures(mesh, cache, cfg)
    flagged = eta <= tol1
    marked = flagged & (h >= tol2)
    return [int(t) for t in live[marked]], [int(t) for t in live[flagged]]


@dataclass
class LoopRecord:
    loop: int
    n_tets: int
    n_vertices: int
    n_marked: int
    n_flagged: int
    n_oracle_calls: int
    wall_seconds: float


@dataclass
class AdaptResult:
    mesh: object
    cache: VertexCache
    history: list = field(default_factory=list)
    marked: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    tol2: float = None
    stopped_early: bool = False

    def history_rows(self):
        return [
            [r.loop, r.n_tets, r.n_vertices, r.n_marked, r.n_oracle_calls, r.wall_seconds]
            for r in self.history
        ]


HISTORY_HEADER = ["loop", "n_tets", "n_vertices", "n_marked", "n_oracle_calls", "wall_seconds"]


def adapt_steps(mesh, oracle, cfg, cache=None):
    """Run the loop, yielding (loop index, marked, flagged, cache) before each refinement.

    When a loop marks nothing, the mesh can no longer change; the remaining
    loops are skipped but still counted in the generation counter, so layers
    match a run that executed every loop.
    """
    cache = VertexCache(oracle, cfg.n_bands, cfg.workers) if cache is None else cache
    tol2 = cfg.resolved_tol2(mesh)
    for n in range(1, cfg.n_max + 1):
        t0 = time.perf_counter()
        calls = cache.extend(mesh)
        marked, flagged = mark(mesh, cache, cfg, tol2)
        seconds = time.perf_counter() - t0 if cfg.record_timings else 0.0
        rec = LoopRecord(n, mesh.n_live, len(mesh.live_vertex_ids()), len(marked), len(flagged), calls, seconds)
        yield rec, marked, flagged, cache
        if not marked:
            mesh.generation += cfg.n_max - n + 1
            return
        mesh.refine(marked)


def adapt_loop(mesh, oracle, cfg: AdaptConfig, cache=None, on_loop=None):
    """Adaptive refinement of ``mesh`` in place; returns an :class:`AdaptResult`.

    After the last loop the cache is extended to the final vertices and the
    final flags are computed on the final mesh; flagged elements are the ones
    kept at degree 2 by the degree rule.
    """
    cache = VertexCache(oracle, cfg.n_bands, cfg.workers) if cache is None else cache
    result = AdaptResult(mesh, cache, tol2=cfg.resolved_tol2(mesh))
    for rec, marked, flagged, _ in adapt_steps(mesh, oracle, cfg, cache):
        result.history.append(rec)
        if on_loop is not None:
            on_loop(rec, mesh, marked, flagged)
        if not marked:
            result.stopped_early = True
    cache.extend(mesh)
    if mesh.n_live:
        marked, flagged = mark(mesh, cache, cfg, result.tol2)
    else:
        marked, flagged = [], []
    result.marked, result.flagged = marked, flagged
    for t in range(len(mesh.marked)):
        mesh.marked[t] = False
    for t in flagged:
        mesh.marked[t] = True
    return result
