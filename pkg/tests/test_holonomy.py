from fractions import Fraction

import numpy as np
import pytest

from holonomy_oracle import stable_translation, unstable_translation
from phlab.base import CAT_MAP, STABLE, UNSTABLE, iterate, leaf_point, path_from_lengths, wrap_diff
from phlab.errors import NoConvergence, NotOnLeaf
from phlab.fibred import evaluate, fibre_map, system_from_json
from phlab.holonomy import (
    covering_radius,
    derivative_holonomy,
    fibre_holonomy,
    fit_geometric_ratio,
    holonomy_group_sample,
    loop_holonomy,
    quadrilateral,
)

W = {"const": [0.0, 0.0], "terms": [{"k": [1, 0], "sin": [0.05, 0.03]}, {"k": [0, 1], "cos": [0.02, 0.04]}]}
LAMBDA_S = (3 - 5**0.5) / 2


def system(fibre):
    return system_from_json({"schema_version": 1, "base": CAT_MAP, "fibre": fibre})


AFFINE4 = {"kind": "affine", "L": [[0, -1], [1, 0]], "w": W}
SHEAR = {"kind": "shear", "alpha": {"terms": [{"k": 1, "sin": 0.1}]}, "w": W}
MOEBIUS = {"kind": "moebius", "rotation": {"const": [0.3, 0.1, 0.2], "terms": [{"k": [1, 0], "cos": [0.5, 0.2, 0.1]}]}}
PERTURBED = {"kind": "perturbed_affine", "L": [[0, -1], [1, 0]], "w": W, "eps": 0.3,
             "shears": [{"axis": 0, "alpha": {"terms": [{"k": 1, "sin": 0.15915494309189535}]}}]}


@pytest.fixture(scope="module")
def aff():
    return system(AFFINE4)


def test_same_point_is_identity(aff):
    x = np.array([0.3, 0.4])
    h = fibre_holonomy(aff, x, x)
    assert np.allclose(h.images, h.points)
    assert np.allclose(wrap_diff(h.translation_fit), 0)


def test_zero_w_is_identity():
    f = system({"kind": "affine", "L": [[0, -1], [1, 1]]})
    x = np.array([0.3, 0.4])
    h = fibre_holonomy(f, x, leaf_point(f.base, x, UNSTABLE, 0.4))
    assert np.abs(wrap_diff(h.images - h.points)).max() < 1e-14


def test_not_on_leaf(aff):
    with pytest.raises(NotOnLeaf):
        fibre_holonomy(aff, [0.1, 0.1], [0.2, 0.3])


@pytest.mark.parametrize("L", [[[0, -1], [1, 0]], [[0, -1], [1, 1]], [[0, -1], [1, -1]]])
@pytest.mark.parametrize("t", [0.07, -0.35, 0.9])
def test_unstable_series_oracle(L, t):
    f = system({"kind": "affine", "L": L, "w": W})
    xf = (Fraction(3, 17), Fraction(11, 23))
    x = np.array([float(xf[0]), float(xf[1])])
    h = fibre_holonomy(f, x, None, UNSTABLE, leaf_length=t)
    tau = unstable_translation(CAT_MAP, L, W, xf, t)
    assert h.fit_deviation < 1e-9
    assert np.abs(wrap_diff(h.translation_fit - tau)).max() < 1e-9


@pytest.mark.parametrize("t", [0.05, -0.6])
def test_stable_series_oracle(aff, t):
    xf = (Fraction(5, 13), Fraction(2, 29))
    x = np.array([float(xf[0]), float(xf[1])])
    h = fibre_holonomy(aff, x, None, STABLE, leaf_length=t)
    tau = stable_translation(CAT_MAP, AFFINE4["L"], W, xf, t)
    assert np.abs(wrap_diff(h.translation_fit - tau)).max() < 1e-9


def test_right_translation_commutes(aff):
    x = np.array([0.61, 0.27])
    y = leaf_point(aff.base, x, UNSTABLE, 0.3)
    rng = np.random.default_rng(4)
    v = rng.random((10, 2))
    tau = rng.random(2)
    a = fibre_holonomy(aff, x, y, points=v).images
    b = fibre_holonomy(aff, x, y, points=v + tau).images
    assert np.abs(wrap_diff(b - a - tau)).max() < 2e-10


@pytest.mark.parametrize("spec", [SHEAR, MOEBIUS, PERTURBED], ids=["shear", "moebius", "perturbed"])
@pytest.mark.parametrize("kind", [UNSTABLE, STABLE])
def test_cocycle_identity(spec, kind):
    f = system(spec)
    x = np.array([0.15, 0.8])
    y = leaf_point(f.base, x, kind, 0.12)
    z = leaf_point(f.base, x, kind, 0.3)
    v = f.random_states(np.random.default_rng(0), 8)[:, 2 : 2 + f.fibre_dim]
    hxy = fibre_holonomy(f, x, y, kind, points=v).images
    hyz = fibre_holonomy(f, y, z, kind, points=hxy).images
    hxz = fibre_holonomy(f, x, z, kind, points=v).images
    d = wrap_diff(hyz - hxz) if f.fibre_kind == "torus" else hyz - hxz
    assert np.abs(d).max() < 3e-10


@pytest.mark.parametrize("spec", [SHEAR, MOEBIUS, PERTURBED], ids=["shear", "moebius", "perturbed"])
def test_equivariance(spec):
    f = system(spec)
    x = np.array([0.42, 0.19])
    t = 0.05
    y = leaf_point(f.base, x, UNSTABLE, t)
    v = f.random_states(np.random.default_rng(1), 5)[:, 2 : 2 + f.fibre_dim]
    left = np.array([fibre_map(f, y, h)[0] for h in fibre_holonomy(f, x, y, points=v).images])
    fv = np.array([fibre_map(f, x, p)[0] for p in v])
    fx = iterate(f.base, x, 1)
    right = fibre_holonomy(f, fx, None, points=fv, leaf_length=t * f.base.lambda_u).images
    d = wrap_diff(left - right) if f.fibre_kind == "torus" else left - right
    assert np.abs(d).max() < 3e-9


def test_derivative_holonomy_affine_identity(aff):
    x = np.array([0.3, 0.3])
    d = derivative_holonomy(aff, x, [0.2, 0.9], leaf_point(aff.base, x, UNSTABLE, 0.25))
    assert np.array_equal(d.matrix, np.eye(2))


def test_derivative_holonomy_shear_fd():
    f = system(SHEAR)
    x = np.array([0.3, 0.55])
    y = leaf_point(f.base, x, UNSTABLE, 0.2)
    v = np.array([0.4, 0.35])
    d = derivative_holonomy(f, x, v, y)
    assert d.matrix[1, 0] == pytest.approx(0.0, abs=1e-12)
    assert d.matrix[0, 0] == pytest.approx(1.0, abs=1e-12)
    h = 1e-5
    cols = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        a, b = fibre_holonomy(f, x, y, points=np.array([v + e, v - e])).images
        cols.append(wrap_diff(a - b) / (2 * h))
    assert np.abs(np.array(cols).T - d.matrix).max() < 1e-4


@pytest.mark.parametrize("spec", [SHEAR, MOEBIUS, PERTURBED], ids=["shear", "moebius", "perturbed"])
@pytest.mark.parametrize("kind", [UNSTABLE, STABLE])
def test_derivative_holonomy_unimodular(spec, kind):
    f = system(spec)
    rng = np.random.default_rng(3)
    for s in f.random_states(rng, 5):
        x, v = s[:2], s[2 : 2 + f.fibre_dim]
        d = derivative_holonomy(f, x, v, None, kind, leaf_length=0.3)
        assert abs(d.det - 1) < 1e-6


def test_gap_ratio_matches_contraction():
    f = system(PERTURBED)
    d = derivative_holonomy(f, [0.2, 0.7], [0.1, 0.1], None, leaf_length=0.08)
    assert abs(fit_geometric_ratio(d.gaps) / LAMBDA_S - 1) < 0.2


def test_no_convergence_past_truncation_cap():
    f = system(SHEAR)
    with pytest.raises(NoConvergence):
        fibre_holonomy(f, [0.2, 0.2], None, leaf_length=0.05, n_points=1, max_n=5)


def test_stall_detection():
    from phlab.holonomy import _stalled

    assert _stalled([1e-3] * 41)
    assert not _stalled([0.5**k for k in range(41)])


def test_loop_zero_and_reverse(aff):
    x = np.array([0.33, 0.71])
    zero = path_from_lengths(aff.base, x, [(UNSTABLE, 0.0), (STABLE, 0.0)])
    assert np.allclose(wrap_diff(loop_holonomy(aff, zero)), 0)
    loop = quadrilateral(aff, x, 0.3, -0.25)
    h = loop_holonomy(aff, loop)
    hr = loop_holonomy(aff, loop.reversed(aff.base))
    assert np.abs(wrap_diff(h + hr)).max() < 2e-10
    assert np.abs(wrap_diff(h)).max() > 1e-3
    assert np.abs(wrap_diff(loop_holonomy(aff, loop, tol=1e-11) - h)).max() < 2e-10


def test_open_loop_rejected(aff):
    path = path_from_lengths(aff.base, [0.1, 0.1], [(UNSTABLE, 0.2), (STABLE, 0.1)])
    with pytest.raises(NotOnLeaf):
        loop_holonomy(aff, path)


def test_group_trivial_for_zero_w():
    f = system({"kind": "affine", "L": [[0, -1], [1, 0]]})
    g = holonomy_group_sample(f, [0.2, 0.3], n_loops=8)
    assert np.allclose(g.elements, 0)
    assert g.covering_radius == pytest.approx(2**0.5 / 2)


def test_group_dense_for_generic_w(aff):
    g = holonomy_group_sample(aff, [0.2, 0.3])
    assert g.covering_radius < 0.05
    assert all(b <= a for a, b in zip(g.radius_history, g.radius_history[1:]))


def test_group_spans_both_directions():
    w1 = {"terms": [{"k": [1, 0], "sin": [0.05, 0.0]}]}
    f = system({"kind": "affine", "L": [[0, -1], [1, 0]], "w": w1})
    g = holonomy_group_sample(f, [0.2, 0.3], n_loops=16, closure_rounds=0)
    d = wrap_diff(g.elements)
    assert np.abs(d[:, 0]).max() > 1e-4 and np.abs(d[:, 1]).max() > 1e-4


def test_group_same_at_two_base_points(aff):
    a = holonomy_group_sample(aff, [0.2, 0.3])
    b = holonomy_group_sample(aff, [0.71, 0.05], rng_seed=1)
    # each sample is within the other's covering radius of everything
    assert covering_radius(np.concatenate([a.elements, b.elements])) <= min(a.covering_radius, b.covering_radius)
