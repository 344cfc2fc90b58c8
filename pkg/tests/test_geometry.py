import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from hpbands.errors import AdmissibilityError, ConfigError
from hpbands.geometry import (
    MODEL1_LITERATURE,
    MODEL2_LITERATURE,
    DesignParams,
    Shape,
    build_cell,
    chi_hat,
    model1_cell,
    model2_cell,
    validate_admissible,
)
from hpbands.oracle import integer_grid

TWO_PI = 2 * math.pi


def test_sphere_zero_mode_is_volume_fraction():
    s = Shape.sphere((0.5, 0.5, 0.5), 0.3)
    assert chi_hat(s, np.zeros(3)) == pytest.approx(4 / 3 * math.pi * 0.3**3, rel=1e-14)
    assert abs(chi_hat(s, np.zeros(3)) - 0.1131) < 1e-4


def test_full_cell_box_is_orthogonal_to_nonzero_modes():
    s = Shape.box((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
    assert abs(chi_hat(s, np.array([TWO_PI, 0, 0]))) < 1e-15


def test_sphere_mode_matches_slice_quadrature():
    # exact slice integral of cos(g x) over the ball, shifted to the centre
    r, g = 0.25, TWO_PI
    ref = quad(lambda t: math.pi * (r * r - t * t) * math.cos(g * t), -r, r, epsabs=1e-15)[0]
    ref = ref * np.exp(-1j * g * 0.5)
    val = chi_hat(Shape.sphere((0.5, 0.5, 0.5), r), np.array([g, 0, 0]))
    assert abs(val - ref) < 1e-12
    assert val.real == pytest.approx(-0.05066059182116888, rel=1e-12)


def test_sphere_mode_matches_voxel_quadrature():
    n = 64
    x = (np.arange(n) + 0.5) / n
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    inside = (X - 0.5) ** 2 + (Y - 0.5) ** 2 + (Z - 0.5) ** 2 < 0.25**2
    ref = np.mean(inside * np.exp(-1j * TWO_PI * X))
    val = chi_hat(Shape.sphere((0.5, 0.5, 0.5), 0.25), np.array([TWO_PI, 0, 0]))
    # the voxelized indicator has a staircase surface; its error is about 5e-3
    assert abs(val - ref) / abs(val) < 1e-2


def test_box_mode_matches_voxel_quadrature():
    s = Shape.box((0.3, 0.5, 0.625), (0.125, 0.25, 0.125))
    n = 64
    x = (np.arange(n) + 0.5) / n
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    G = TWO_PI * np.array([1, 2, -1])
    ref = np.mean(s.contains(np.stack([X, Y, Z], -1), 1.0) * np.exp(-1j * (G[0] * X + G[1] * Y + G[2] * Z)))
    # box faces lie on voxel boundaries, so the midpoint rule is exact up to aliasing
    assert abs(chi_hat(s, G) - ref) < 1e-3


@settings(max_examples=40, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3), st.floats(0.05, 0.45), st.booleans())
def test_chi_hat_conjugate_symmetry(i, j, k, size, sphere):
    s = Shape.sphere((0.2, 0.4, 0.7), size) if sphere else Shape.box((0.2, 0.4, 0.7), (size, size / 2, size / 3))
    G = TWO_PI * np.array([i, j, k], float)
    assert abs(chi_hat(s, -G) - np.conj(chi_hat(s, G))) < 1e-14


def test_parseval_bound_for_sphere():
    s = Shape.sphere((0.5, 0.5, 0.5), 0.3)
    G = TWO_PI * integer_grid(4)
    total = sum(abs(chi_hat(s, g)) ** 2 for g in G)
    f = chi_hat(s, np.zeros(3)).real
    assert total <= f * 1.01
    assert total >= 0.9 * f


def test_model1_literature_and_optimized_cells_are_valid():
    assert build_cell(DesignParams.literature(1)).filling_fraction() > 0
    cell = model1_cell(DesignParams(1, (0.1696, 0.1810, 0.2342, 0.3214)))
    assert len(cell.shapes) == 6


def test_model1_zero_width_rejected():
    with pytest.raises(AdmissibilityError):
        model1_cell(DesignParams(1, (0.0, 0.0, 0.25, 0.25)))


def test_model2_cells():
    cell = model2_cell(DesignParams.literature(2))
    assert cell.eps_inclusion == 13.0
    model2_cell(DesignParams(2, (0.1707, 0.1707, 0.1707, 0.2190)))
    with pytest.raises(AdmissibilityError):
        model2_cell(DesignParams(2, (0.5, 0.5, 0.5, 0.5)))


def test_literature_constants():
    assert MODEL1_LITERATURE == (0.125, 0.125, 0.25, 0.25)
    assert MODEL2_LITERATURE == pytest.approx((1 / 6, 1 / 6, 1 / 6, 11 / 30))


def test_validate_admissible_examples():
    assert validate_admissible(DesignParams(1, (0.5, 0.5, 1.0, 1.0)))
    assert not validate_admissible(DesignParams(1, (0.6, 0.1, 0.1, 0.1)))
    assert not validate_admissible(DesignParams(2, (0.5, 0.5, 0.5, 0.5)))
    # every entry of a model 2 design lives in [0, a/2], so a radius of a*sqrt(2)/2 is outside
    assert not validate_admissible(DesignParams(2, (0.0, 0.0, 0.0, math.sqrt(2) / 2)))
    assert validate_admissible(DesignParams(2, (0.0, 0.0, 0.2, 0.5)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 0.5), min_size=4, max_size=4), st.floats(0, 1))
def test_model2_admissibility_monotone_in_radius(theta, shrink):
    p = DesignParams(2, theta)
    if validate_admissible(p):
        assert validate_admissible(DesignParams(2, (*theta[:3], theta[3] * shrink)))


def test_overlapping_shapes_rejected():
    shapes = (Shape.box((0.5, 0.5, 0.5), (0.2, 0.2, 0.2)), Shape.sphere((0.6, 0.5, 0.5), 0.2))
    with pytest.raises(AdmissibilityError):
        build_cell(DesignParams.literature(1), shapes=shapes)


def test_bad_model_id():
    with pytest.raises(ConfigError):
        DesignParams(3, (0.1, 0.1, 0.1, 0.1))


def test_eta_zero_mode_is_mean_inverse_eps():
    cell = build_cell(DesignParams.literature(2))
    f = cell.filling_fraction()
    assert cell.eta_hat(np.zeros((1, 3)))[0].real == pytest.approx(f / 13 + (1 - f), rel=1e-12)
