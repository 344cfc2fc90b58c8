import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpbands.bench import uniform_degrees
from hpbands.bzmesh import ibz_sc_full_sym
from hpbands.errors import AdmissibilityError, ConfigError, NumericalError
from hpbands.gapopt import (
    SYNTHETIC_BOUNDS,
    SYNTHETIC_START,
    GaussianProcess,
    ModelObjective,
    _cholesky,
    acquisition_ei,
    bo_loop,
    expected_improvement,
    gap_phi,
    gp_fit,
    grid_max,
    maximize_ei,
    multi_from_table,
    objective_multi,
    objective_phi,
    quasi_random_points,
    synthetic_2d,
)
from hpbands.geometry import validate_admissible
from hpbands.hpinterp import build_interpolant
from hpbands.oracle import EmptyLatticeOracle

PI = math.pi


# ---------------------------------------------------------------- objective


def test_phi_formula():
    assert gap_phi(3.0, 2.0) == pytest.approx(0.4)
    assert gap_phi(2.0, 2.0) == 0.0
    with pytest.raises(NumericalError):
        gap_phi(0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 10), st.floats(0.1, 10)), min_size=1, max_size=30))
def test_phi_sign_matches_band_overlap(rows):
    table = np.sort(np.array(rows), axis=1)
    n, res = multi_from_table(table)
    assert n == 1
    assert (res.phi > 0) == (table[:, 1].min() > table[:, 0].max())


def test_multi_prefers_smallest_index_on_ties():
    table = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    n, res = multi_from_table(table)
    assert n == 1 and res.phi == pytest.approx(2 / 3)


@pytest.fixture(scope="module")
def el_interp():
    m = ibz_sc_full_sym()
    m.refine([0])
    return build_interpolant(m, uniform_degrees(m, 3), EmptyLatticeOracle(), (1, 2, 3))


def test_objective_phi_from_interpolant(el_interp):
    res = objective_phi(el_interp, 1, n_eval=500)
    assert res.source == "interpolant" and res.n_eval == el_interp.n_points + 500
    assert res.phi <= 0
    # band 1 reaches 3 pi^2 at R, band 2 drops to pi^2 at X
    assert res.max_lower == pytest.approx(3 * PI**2, rel=1e-9)
    assert res.min_upper == pytest.approx(PI**2, rel=1e-9)


def test_objective_phi_missing_band(el_interp):
    with pytest.raises(ConfigError):
        objective_phi(el_interp, 3)


def test_objective_phi_oracle_sweep():
    pts = quasi_random_points(ibz_sc_full_sym(), 256, seed=0)
    res = objective_phi(EmptyLatticeOracle(), 1, points=pts)
    assert res.source == "oracle" and res.n_eval == 256
    with pytest.raises(ConfigError):
        objective_phi(EmptyLatticeOracle(), 1)


def test_objective_multi(el_interp):
    n, res = objective_multi(el_interp, 2, n_eval=200)
    assert n == 1
    assert res.phi == objective_phi(el_interp, 1, n_eval=200).phi
    n3, res3 = objective_multi(el_interp, 3, n_eval=200)
    # free space has no gaps
    assert res3.phi <= 0
    with pytest.raises(ConfigError):
        objective_multi(el_interp, 1)


def test_quasi_random_points_inside_mesh():
    m = ibz_sc_full_sym()
    for k in quasi_random_points(m, 300, 2):
        assert m.barycentric(0, k).min() >= -1e-12


# ---------------------------------------------------------------- surrogate


def test_gp_constant_data():
    gp = gp_fit([[0.2], [0.8]], [1.5, 1.5], [[0, 1]])
    mu, _ = gp.predict(np.linspace(0.2, 0.8, 7)[:, None])
    assert np.allclose(mu, 1.5, atol=1e-6)


def test_gp_interpolates_training_data():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, size=(12, 2))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2
    gp = gp_fit(X, y, SYNTHETIC_BOUNDS, seed=1)
    mu, sd = gp.predict(X)
    assert np.max(np.abs(mu - y)) <= 1e-6
    assert np.all(sd < 1e-3)


def test_gp_argmax_near_known_optimum():
    star = np.array([0.37, 0.61])
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 1, size=(25, 2))
    y = -np.sum((X - star) ** 2, axis=1)
    gp = gp_fit(X, y, SYNTHETIC_BOUNDS)
    g = np.linspace(0, 1, 41)
    G = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1).T
    best = G[np.argmax(gp.predict(G)[0])]
    assert np.all(np.abs(best - star) <= g[1] - g[0])


def test_gp_duplicates_are_averaged():
    gp = gp_fit([[0.1], [0.1], [0.9]], [1.0, 3.0, 0.0], [[0, 1]])
    assert len(gp.X) == 2
    assert gp.predict([[0.1]])[0][0] == pytest.approx(2.0, abs=1e-6)


def test_gp_needs_two_distinct_points():
    with pytest.raises(ConfigError):
        gp_fit([[0.1], [0.1]], [1.0, 2.0], [[0, 1]])


def test_cholesky_jitter_failure():
    with pytest.raises(NumericalError):
        _cholesky(-np.eye(3))
    L, jitter = _cholesky(np.ones((3, 3)))
    assert jitter >= 1e-8 and np.all(np.isfinite(L))


def test_ei_properties():
    X = np.array([[0.1], [0.5], [0.9]])
    y = np.array([0.2, 1.0, 0.4])
    gp = gp_fit(X, y, [[0, 1]])
    grid = np.linspace(0, 1, 501)[:, None]
    ei = expected_improvement(gp, grid, y.max())
    assert np.all(ei >= 0)
    for x in X:
        assert acquisition_ei(gp, x, y.max()) <= 1e-10


def test_ei_maximizer_matches_dense_grid():
    gp = gp_fit([[0.3], [0.6]], [0.0, 1.0], [[0, 1]])
    grid = np.linspace(0, 1, 20001)[:, None]
    ei = expected_improvement(gp, grid, 1.0)
    x, e = maximize_ei(gp, 1.0, seed=0)
    assert e >= ei.max() * (1 - 1e-3)
    assert abs(x[0] - grid[np.argmax(ei), 0]) < 0.02


def test_maximize_ei_all_infeasible():
    gp = gp_fit([[0.3], [0.6]], [0.0, 1.0], [[0, 1]])
    with pytest.raises(AdmissibilityError):
        maximize_ei(gp, 1.0, feasible=lambda x: False)


# ---------------------------------------------------------------- loop


def test_single_evaluation_returns_start():
    res = bo_loop(synthetic_2d, SYNTHETIC_START, SYNTHETIC_BOUNDS, n_max=1)
    assert res.best_theta == SYNTHETIC_START and len(res.trace) == 1
    assert res.best_phi == synthetic_2d(SYNTHETIC_START)


def test_bo_synthetic_one_seed():
    gm = grid_max(synthetic_2d, SYNTHETIC_BOUNDS)
    res = bo_loop(synthetic_2d, SYNTHETIC_START, SYNTHETIC_BOUNDS, n_max=25, seed=0)
    assert res.best_phi >= 0.95 * gm
    best = res.best_so_far()
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))


def test_bo_reproducible_and_feasible():
    feasible = lambda x: x[0] + x[1] <= 1.2
    runs = [bo_loop(synthetic_2d, (0.2, 0.2), SYNTHETIC_BOUNDS, n_max=8, seed=4, feasible=feasible)
            for _ in range(2)]
    assert runs[0].rows() == runs[1].rows()
    assert all(feasible(e.theta) for e in runs[0].trace)


def test_paper_stopping_guard():
    # start at the global maximum: the first new point cannot beat it
    res = bo_loop(synthetic_2d, (0.7, 0.3), SYNTHETIC_BOUNDS, n_max=10, seed=0, paper_stopping=True)
    assert res.stopped_by_guard and len(res.trace) == 2


def test_infeasible_start_rejected():
    with pytest.raises(AdmissibilityError):
        bo_loop(synthetic_2d, (0.9, 0.9), SYNTHETIC_BOUNDS, feasible=lambda x: x[0] < 0.5)


def test_model_objective_small():
    obj = ModelObjective(1, 4, free=(0, 1), modes_per_axis=3, n_max=1, n_eval=100)
    res = obj(obj.start())
    assert res.n_oracle_calls > 0 and np.isfinite(res.phi)
    assert obj.full_theta([0.2, 0.1]) == (0.2, 0.1, 0.25, 0.25)
    assert obj.feasible(obj.start()) and not obj.feasible([0.7, 0.1])


def test_model1_two_parameter_run_starts_at_literature():
    obj = ModelObjective(1, 4, free=(0, 1), modes_per_axis=3, n_max=1, n_eval=100)
    res = bo_loop(obj, obj.start(), obj.bounds(), n_max=3, seed=0, feasible=obj.feasible, accept=obj.cell_ok)
    assert res.trace[0].theta == (0.125, 0.125)
    assert res.best_phi >= res.trace[0].phi - 1e-3
    assert all(validate_admissible(obj.params(e.theta)) for e in res.trace)
