import math

import numpy as np
import pytest

from hpbands.adapt import (
    KAPPA_DEFAULT,
    KAPPA_THEORY,
    AdaptConfig,
    VertexCache,
    adapt_loop,
    gradient_bound,
    indicator,
    local_tolerance,
    mark,
)
from hpbands.bzmesh import TetMesh, box_mesh, check_conformity, ibz_sc_full_sym
from hpbands.errors import ConfigError, HPBandsError
from hpbands.oracle import BandSample, CountingOracle, EmptyLatticeOracle, empty_lattice_singular_set

PI = math.pi


def fake_cache(values, grads=None):
    cache = VertexCache(None, len(values[0]))
    for v, vals in enumerate(values):
        g = np.zeros((len(vals), 3)) if grads is None else np.asarray(grads[v], float)
        cache.samples[v] = BandSample(np.asarray(vals, float), g)
    return cache


def small_tet(h=0.1):
    # longest edge is the first one, of length h
    P = np.array([[0, 0, 0], [h, 0, 0], [h / 2, h / 2, 0], [h / 2, 0, h / 2]], float)
    return TetMesh(P, [[0, 1, 2, 3]])


def test_indicator_example():
    cache = fake_cache([(1.0, 1.5, 3.0), (1.1, 1.4, 3.2), (0.9, 1.6, 2.8), (1.0, 1.45, 3.1)])
    assert indicator(cache, small_tet(), 0, 1) == pytest.approx(0.3)


def test_indicator_zero_at_tie():
    cache = fake_cache([(1.0, 1.0, 3.0)] * 4)
    assert indicator(cache, small_tet(), 0, 1) == 0.0


def test_band_window_for_ell_4():
    cfg = AdaptConfig(ell=4)
    assert list(cfg.q_range) == [3, 4, 5]
    assert cfg.n_bands == 6


def test_local_tolerance_product():
    g = np.zeros((3, 3))
    g[1] = [3.0, 4.0, 0.0]
    cache = fake_cache([(1.0, 2.0, 3.0)] * 4, [g] * 4)
    mesh = small_tet(0.1)
    assert mesh.diameter(0) == pytest.approx(0.1)
    assert local_tolerance(cache, mesh, 0, 1, KAPPA_DEFAULT) == pytest.approx(math.sqrt(2), rel=1e-12)


def test_zero_gradients_never_flag_separated_bands():
    cache = fake_cache([(1.0, 2.0, 3.0)] * 4)
    mesh = small_tet()
    assert local_tolerance(cache, mesh, 0, 1) == 0.0
    marked, flagged = mark(mesh, cache, AdaptConfig(ell=1))
    assert marked == [] and flagged == []


def test_gradient_bound_near_gamma():
    o = EmptyLatticeOracle()
    P = np.array([[0.1, 0.1, 0.1], [0.3, 0.1, 0.1], [0.1, 0.3, 0.1], [0.1, 0.1, 0.3]])
    mesh = TetMesh(P, [[0, 1, 2, 3]])
    cache = VertexCache(o, 3)
    cache.extend(mesh)
    # band 1 is |k|^2 there, band 2 has a larger slope; the bound is at least 2 max |k|
    assert gradient_bound(cache, mesh, 0, 1) >= 2 * np.linalg.norm(P, axis=1).max()


def test_missing_cache_entry():
    with pytest.raises(HPBandsError):
        indicator(VertexCache(None, 3), small_tet(), 0, 1)


def test_size_guard_blocks_marking():
    mesh = ibz_sc_full_sym()
    cache = VertexCache(EmptyLatticeOracle(), 3)
    cache.extend(mesh)
    cfg = AdaptConfig(ell=1, tol2=100.0)
    marked, flagged = mark(mesh, cache, cfg)
    assert marked == [] and flagged == [0]


def test_config_validation():
    for kw in ({"ell": 0}, {"kappa": 0}, {"tol2": -1}, {"n_max": -1}):
        with pytest.raises(ConfigError):
            AdaptConfig(**kw)


def test_zero_loops_leave_mesh_untouched():
    mesh = ibz_sc_full_sym()
    res = adapt_loop(mesh, EmptyLatticeOracle(), AdaptConfig(n_max=0))
    assert mesh.n_live == 1 and res.history == [] and mesh.generation == 1
    assert len(res.cache) == 4


def test_infinite_tol2_stops_after_first_loop():
    mesh = ibz_sc_full_sym()
    res = adapt_loop(mesh, EmptyLatticeOracle(), AdaptConfig(n_max=8, tol2=math.inf))
    assert len(res.history) == 1 and res.stopped_early
    assert mesh.n_live == 1
    # the skipped loops still count toward layers
    assert mesh.n_iter == 8


def test_oracle_calls_equal_vertices_and_history():
    mesh = ibz_sc_full_sym()
    oracle = CountingOracle(EmptyLatticeOracle())
    res = adapt_loop(mesh, oracle, AdaptConfig(n_max=5))
    assert oracle.calls == len(mesh.live_vertex_ids()) == len(res.cache)
    assert len(res.history) <= 5
    assert sum(r.n_oracle_calls for r in res.history) <= oracle.calls
    assert [r.loop for r in res.history] == list(range(1, len(res.history) + 1))


def test_degeneracy_elements_marked_on_ibz():
    mesh = ibz_sc_full_sym()
    cfg = AdaptConfig(ell=1, kappa=KAPPA_THEORY, tol2=1e-9, n_max=5)
    sset = empty_lattice_singular_set(1.0, 3, mesh.points(0), min_band=1, cutoff=3)
    oracle = EmptyLatticeOracle(cutoff=3)
    from hpbands.adapt import adapt_steps

    for rec, marked, flagged, cache in adapt_steps(mesh, oracle, cfg):
        m = set(marked)
        for t in mesh.live():
            if sset.intersects_tet(mesh.points(t)):
                assert t in m


def test_marks_concentrate_near_zone_face():
    lo, hi = (PI - 0.6, 0.05, 0.1), (PI + 0.5, 0.7, 0.55)
    mesh = box_mesh(lo, hi)
    oracle = CountingOracle(EmptyLatticeOracle())
    adapt_loop(mesh, oracle, AdaptConfig(ell=1, n_max=8))
    uniform = box_mesh(lo, hi)
    for _ in range(8):
        uniform.refine(uniform.live())
    assert len(mesh.live_vertex_ids()) < len(uniform.live_vertex_ids())
    assert not check_conformity(mesh)["defects"]
    # elements on the crossing are much smaller than elements away from it, and all are flagged
    sset = empty_lattice_singular_set(1.0, 3, [lo, hi], min_band=1, cutoff=3)
    live = mesh.live()
    vol = np.array([mesh.volume(t) for t in live])
    cx = np.array([mesh.points(t)[:, 0].mean() for t in live])
    on = np.array([sset.intersects_tet(mesh.points(t)) for t in live])
    assert vol[np.abs(cx - PI) > 0.4].mean() > 4 * vol[on].mean()
    flagged = {t for t in live if mesh.marked[t]}
    assert all(t in flagged for t, hit in zip(live, on) if hit)


def test_final_flags_recorded_on_mesh():
    mesh = ibz_sc_full_sym()
    res = adapt_loop(mesh, EmptyLatticeOracle(), AdaptConfig(n_max=3))
    assert sorted(t for t in mesh.live() if mesh.marked[t]) == sorted(res.flagged)
