import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phlab.base import (
    CAT_MAP,
    STABLE,
    UNSTABLE,
    connect_su,
    iterate,
    leaf_coordinate,
    leaf_point,
    make_hyperbolic_automorphism,
    path_from_lengths,
    periodic_points,
    reduce_mod1,
    torus_dist,
)
from phlab.errors import NotHyperbolic, NotUnimodular, PeriodTooLarge

unit = st.floats(0.0, 1.0, allow_nan=False, exclude_max=True)


@pytest.fixture(scope="module")
def cat():
    return make_hyperbolic_automorphism(CAT_MAP)


def test_cat_map_eigenvalues(cat):
    # oracle: numpy eigendecomposition of the float matrix
    ev = np.sort(np.abs(np.linalg.eigvals(np.array(CAT_MAP, dtype=float))))
    assert cat.lambda_u == pytest.approx(ev[1], abs=1e-12)
    assert cat.lambda_s == pytest.approx(ev[0], abs=1e-12)
    assert cat.lambda_u == pytest.approx((3 + math.sqrt(5)) / 2, abs=1e-12)
    assert math.log(cat.lambda_u) == pytest.approx(0.9624236501192069, abs=1e-12)
    A = cat.float_matrix
    assert np.allclose(A @ cat.e_u, cat.lambda_u * cat.e_u, atol=1e-12)
    assert np.allclose(A @ cat.e_s, cat.lambda_s * cat.e_s, atol=1e-12)
    assert np.linalg.norm(cat.e_u) == pytest.approx(1.0)


@pytest.mark.parametrize("m", [[[1, 0], [0, 1]], [[0, -1], [1, 0]], [[1, 1], [0, 1]]])
def test_rejects_non_hyperbolic(m):
    with pytest.raises(NotHyperbolic):
        make_hyperbolic_automorphism(m)


def test_rejects_non_unimodular():
    with pytest.raises(NotUnimodular):
        make_hyperbolic_automorphism([[2, 0], [0, 1]])


def test_negative_determinant_allowed():
    g = make_hyperbolic_automorphism([[1, 1], [1, 0]])
    assert g.det == -1
    assert abs(g.lambda_u) > 1 > abs(g.lambda_s)


def test_iterate_examples(cat):
    assert np.array_equal(iterate(cat, [0.0, 0.0], 10), [0.0, 0.0])
    assert np.allclose(iterate(cat, [0.5, 0.5], 1), [0.5, 0.0])
    back = iterate(cat, iterate(cat, [0.2, 0.3], 5), -5)
    assert torus_dist(back, [0.2, 0.3]) < 1e-9


def test_reduce_mod1_range():
    y = reduce_mod1([-1e-18, 1.0, 2.5, -0.25])
    assert np.all((y >= 0) & (y < 1))
    assert np.allclose(y, [0.0, 0.0, 0.5, 0.75])


@settings(max_examples=50, deadline=None)
@given(unit, unit, st.floats(-0.05, 0.05))
def test_leaf_contraction_rates(x1, x2, t):
    g = make_hyperbolic_automorphism(CAT_MAP)
    x = np.array([x1, x2])
    # unstable leaves contract under g^-1, stable ones under g
    y = leaf_point(g, x, UNSTABLE, t)
    for k in range(1, 6):
        d = torus_dist(iterate(g, x, -k), iterate(g, y, -k))
        assert d == pytest.approx(abs(t) / g.lambda_u**k, abs=1e-10)
    y = leaf_point(g, x, STABLE, t)
    for k in range(1, 6):
        d = torus_dist(iterate(g, x, k), iterate(g, y, k))
        assert d == pytest.approx(abs(t) * g.lambda_s**k, abs=1e-10)


def test_leaf_point_zero(cat):
    assert np.allclose(leaf_point(cat, [0.3, 0.7], UNSTABLE, 0.0), [0.3, 0.7])


def test_leaf_coordinate_roundtrip(cat):
    x = np.array([0.1, 0.9])
    y = leaf_point(cat, x, UNSTABLE, 0.37)
    assert leaf_coordinate(cat, x, y, UNSTABLE) == pytest.approx(0.37, abs=1e-12)
    assert leaf_coordinate(cat, x, y, STABLE) is None


def test_connect_su_same_point(cat):
    p = connect_su(cat, [0.4, 0.4], [0.4, 0.4])
    assert [leg.signed_length for leg in p.legs] == pytest.approx([0.0, 0.0], abs=1e-15)


def test_connect_su_on_unstable_leaf(cat):
    x = np.array([0.25, 0.6])
    y = leaf_point(cat, x, UNSTABLE, 0.03)
    p = connect_su(cat, x, y)
    assert p.legs[0].signed_length == pytest.approx(0.03, abs=1e-12)
    assert p.legs[1].signed_length == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(unit, unit, unit, unit)
def test_connect_su_endpoint(a, b, c, d):
    g = make_hyperbolic_automorphism(CAT_MAP)
    p = connect_su(g, [a, b], [c, d])
    assert p.is_consistent(g)
    assert torus_dist(p.endpoint(g), reduce_mod1([c, d])) < 1e-9
    r = p.reversed(g)
    assert torus_dist(r.endpoint(g), reduce_mod1([a, b])) < 1e-9


def test_path_from_lengths_consistent(cat):
    p = path_from_lengths(cat, [0.1, 0.2], [(UNSTABLE, 0.3), (STABLE, -0.2), (UNSTABLE, 0.05)])
    assert p.is_consistent(cat)
    assert len(p.to_json()) == 3


def _brute_periodic(A, n, denom):
    """Brute force over the lattice (1/denom) Z^2, checking A^n x = x exactly."""
    M = np.linalg.matrix_power(np.array(A, dtype=np.int64), n)
    pts = []
    for i in range(denom):
        for j in range(denom):
            v = M @ np.array([i, j]) - np.array([i, j])
            if v[0] % denom == 0 and v[1] % denom == 0:
                pts.append((i / denom, j / denom))
    return sorted(pts)


@pytest.mark.parametrize("n,count", [(1, 1), (2, 5), (3, 16), (4, 45)])
def test_periodic_points_counts(cat, n, count):
    # |det(A^n - I)| = L_{2n} - 2 for the cat map
    pts = periodic_points(cat, n)
    assert len(pts) == count
    got = sorted(tuple(np.round(p * count, 9) / count) for p in pts)
    assert np.allclose(got, _brute_periodic(CAT_MAP, n, count), atol=1e-12)
    for p in pts:
        assert torus_dist(iterate(cat, p, n), p) < 1e-9


def test_periodic_points_contains_origin():
    g = make_hyperbolic_automorphism([[3, 1], [2, 1]])
    assert any(np.allclose(p, 0) for p in periodic_points(g, 1))


def test_periodic_points_cap(cat):
    with pytest.raises(PeriodTooLarge):
        periodic_points(cat, 12, cap=1000)
