import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phlab.base import CAT_MAP
from phlab.conformal import barycentre_field, invariant_structure_of
from phlab.errors import HeavyAtom, Inconclusive, SingularMatrix
from phlab.fibred import system_from_json
from phlab.projective import (
    ClassifierConfig,
    binning_width,
    bl_distance,
    classify_trichotomy,
    deposit,
    detect_atoms,
    empirical_disintegration,
    projectivize,
    push_histogram,
    test_su_invariance,
)

W = {"terms": [{"k": [1, 0], "sin": [0.05, 0.03]}, {"k": [0, 1], "cos": [0.02, 0.04]}]}
AFFINE6 = {"kind": "affine", "L": [[0, -1], [1, 1]], "w": W}
SHEAR = {"kind": "shear", "alpha": {"terms": [{"k": 1, "sin": 0.1}]}, "w": W}
PERTURBED = {"kind": "perturbed_affine", "L": [[0, -1], [1, 0]], "w": W, "eps": 0.3,
             "shears": [{"axis": 0, "alpha": {"terms": [{"k": 1, "sin": 0.15915494309189535}]}}]}
SMALL = dict(n_particles=1024, burn_in=300, n_steps=600)


def system(fibre):
    return system_from_json({"schema_version": 1, "base": CAT_MAP, "fibre": fibre})


@pytest.fixture(scope="module")
def affine_field():
    f = system(AFFINE6)
    return f, empirical_disintegration(f)


@pytest.fixture(scope="module")
def shear_field():
    f = system(SHEAR)
    return f, empirical_disintegration(f, initial_angle=0.0, **SMALL)


def test_projectivize_examples():
    assert projectivize(np.eye(2), 0.7) == pytest.approx(0.7)
    assert projectivize([[0, -1], [1, 0]], 0.2) == pytest.approx(0.2 + np.pi / 2)
    assert projectivize([[0, -1], [1, 0]], 2.0) == pytest.approx(2.0 + np.pi / 2 - np.pi)
    assert projectivize([[1, 1], [0, 1]], np.pi / 2) == pytest.approx(np.pi / 4)
    with pytest.raises(SingularMatrix):
        projectivize([[1, 2], [2, 4]], 0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_projectivize_is_an_action(a, b, c, d):
    m = np.array([[a, b], [c, d]])
    if abs(np.linalg.det(m)) < 1e-3:
        return
    n = np.array([[1.0, 0.3], [-0.2, 1.0]])
    th = np.linspace(0, np.pi, 17, endpoint=False)
    lhs = projectivize(m @ n, th)
    rhs = projectivize(m, projectivize(n, th))
    assert np.abs(np.angle(np.exp(2j * (lhs - rhs)))).max() < 1e-9


def test_identity_push_is_bin_exact():
    h = np.random.default_rng(0).random(360)
    assert np.array_equal(push_histogram(h, np.eye(2)), h)


def test_deposit_preserves_mass():
    rng = np.random.default_rng(1)
    th = rng.uniform(0, np.pi, 1000)
    assert deposit(th, np.ones(1000), 90).sum() == pytest.approx(1000)


def test_bl_distance_properties():
    n = 180
    a = np.zeros(n)
    a[10] = 1
    b = np.zeros(n)
    b[12] = 1
    # two deltas two bins apart: Lipschitz-limited
    assert bl_distance(a, b) == pytest.approx(2 * binning_width(n))
    assert bl_distance(a, a) == pytest.approx(0)
    far = np.zeros(n)
    far[100] = 1
    assert bl_distance(a, far) == pytest.approx(2.0)


@pytest.mark.parametrize(
    "hist, count",
    [
        ("delta", 1),
        ("pair", 2),
        ("uniform", 0),
    ],
)
def test_detect_atoms_examples(hist, count):
    h = np.zeros(360)
    if hist == "delta":
        h[0] = 1
    elif hist == "pair":
        h[0] = h[180] = 0.5
    else:
        h[:] = 1
    rep = detect_atoms(h)
    assert rep.count == count
    if hist == "delta":
        assert rep.locations[0] == pytest.approx(np.pi / 720)
        assert rep.masses[0] == pytest.approx(1)


def test_atom_wrapping_cluster():
    h = np.zeros(360)
    h[[358, 359, 0, 1]] = 0.25
    rep = detect_atoms(h)
    assert rep.count == 1
    assert min(rep.locations[0], np.pi - rep.locations[0]) < 0.01


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=36, max_size=36))
def test_never_more_than_two_atoms(masses):
    h = np.array(masses)
    if h.sum() == 0:
        return
    rep = detect_atoms(h)
    assert rep.count <= 2
    assert sum(rep.masses) <= 1 + 1e-12


def test_field_shape_and_masses(affine_field):
    f, d = affine_field
    assert d.counts.shape == (2, 6**4, 360)
    assert not d.sparse.any()
    c = d.conditional(5)
    assert c.hist.sum() == pytest.approx(1, abs=1e-9)
    assert d.total_samples == 4096 * 2000 * 8


def test_field_is_seed_deterministic():
    f = system(AFFINE6)
    a = empirical_disintegration(f, n_particles=64, burn_in=10, n_steps=50, seed=3)
    b = empirical_disintegration(f, n_particles=64, burn_in=10, n_steps=50, seed=3)
    assert np.array_equal(a.counts, b.counts)


def test_csv_rows_round_trip(affine_field):
    _, d = affine_field
    rows = d.csv_rows()
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    back = list(csv.reader(io.StringIO(buf.getvalue())))
    assert len(back) == len(rows)
    total = {}
    for r in rows:
        total[r[:4]] = total.get(r[:4], 0) + r[5]
    assert max(abs(v - 1) for v in total.values()) < 1e-9
    assert d.header()["n_bins"] == 360


def test_shear_seeded_horizontal_is_delta(shear_field):
    f, d = shear_field
    for c in range(0, d.n_cells, 97):
        cond = d.conditional(c)
        assert cond.hist[0] + cond.hist[-1] == pytest.approx(1.0)
        assert cond.atoms.count == 1


def test_shear_residuals_vanish(shear_field):
    f, d = shear_field
    r = test_su_invariance(d, f, n_pairs=16)
    # only the bin-centre representation of the fixed direction moves
    assert r.dynamics < 1e-3 * r.binning_width
    assert max(r.unstable, r.stable) < r.binning_width


def test_shear_barycentre_rejected(shear_field):
    with pytest.raises(HeavyAtom) as err:
        barycentre_field(shear_field[1])
    assert err.value.cell is not None


def test_affine_residuals_and_structure(affine_field):
    f, d = affine_field
    r = test_su_invariance(d, f, n_pairs=24)
    assert r.passed
    assert max(r.dynamics, r.unstable, r.stable) < 2 * r.binning_width
    bf = barycentre_field(d)
    assert bf.distance_to(invariant_structure_of(f.L)) < 0.05


def test_scrambled_field_fails(affine_field):
    f, d = affine_field
    r = test_su_invariance(d.scrambled(seed=1), f, n_pairs=24)
    assert not r.passed
    assert min(r.dynamics, r.unstable, r.stable) > 10 * r.binning_width


def test_perturbed_has_distinct_exponents():
    rep = classify_trichotomy(system(PERTURBED), ClassifierConfig(n_iter=20_000, n_orbits=8))
    assert rep.label == "DistinctExponents"
    assert rep.symplectic["hyperbolic"] and rep.symplectic["symmetric"]


def test_perturbed_field_has_no_invariant_structure():
    f = system(PERTURBED)
    d = empirical_disintegration(f)
    assert not test_su_invariance(d, f, n_pairs=24).passed


def test_inconclusive_carries_report():
    f = system(AFFINE6)
    cfg = ClassifierConfig(n_iter=2000, n_orbits=4, gate_factor=0.0, **SMALL)
    with pytest.raises(Inconclusive) as err:
        classify_trichotomy(f, cfg)
    assert err.value.report.residuals["passed"] is False
    assert err.value.report.verdict is None
