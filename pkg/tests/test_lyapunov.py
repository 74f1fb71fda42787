import math

import numpy as np
import pytest

from phlab.base import CAT_MAP
from phlab.fibred import system_from_json
from phlab.lyapunov import (
    adapted_centre_norm,
    centre_exponents,
    centre_exponents_vector,
    certify_bunching,
    check_symplectic_symmetry,
    gap_significant,
    symmetry_holds,
)

W = {"const": [0.0, 0.0], "terms": [{"k": [1, 0], "sin": [0.05, 0.03]}, {"k": [0, 1], "cos": [0.02, 0.04]}]}
ALPHA = {"terms": [{"k": 1, "sin": 0.15915494309189535}]}


def system(fibre):
    return system_from_json({"schema_version": 1, "base": CAT_MAP, "fibre": fibre})


@pytest.fixture(scope="module")
def perturbed():
    return system({"kind": "perturbed_affine", "L": [[0, -1], [1, 0]], "w": W, "eps": 0.3,
                   "shears": [{"axis": 0, "alpha": ALPHA}]})


@pytest.mark.parametrize("L", [[[0, -1], [1, 0]], [[0, -1], [1, 1]], [[0, -1], [1, -1]]])
def test_affine_exponents_vanish(L):
    # bounded cocycle: |log sigma(L^n)| <= log cond, so |lambda| <= log(cond)/n
    f = system({"kind": "affine", "L": L, "w": W})
    est = centre_exponents(f, n_orbits=4, n_iter=20_000, seed=1)
    bound = math.log(np.linalg.cond(np.array(L, dtype=float))) / 20_000 + 1e-12
    assert abs(est.lambda_plus) <= bound
    assert abs(est.lambda_minus) <= bound
    assert est.orbit_logdet == pytest.approx(np.zeros(4), abs=1e-12)


def test_shear_exponents_small():
    # unipotent cocycle: norms grow at most linearly, exponents are O(log n / n)
    f = system({"kind": "shear", "alpha": {"terms": [{"k": 1, "sin": 0.1}]}, "w": W})
    est = centre_exponents(f, n_orbits=4, n_iter=20_000, seed=2)
    assert abs(est.lambda_plus) < 1e-3
    assert symmetry_holds(est)


def test_perturbed_gap_and_symmetry(perturbed):
    est = centre_exponents(perturbed, n_orbits=8, n_iter=20_000, seed=0)
    assert est.lambda_plus > 0.01
    assert gap_significant(est, floor=1e-3)
    assert symmetry_holds(est)
    assert check_symplectic_symmetry(est) < 1e-12
    assert abs(est.mean_logdet) < 1e-12


def test_two_estimators_agree(perturbed):
    est = centre_exponents(perturbed, n_orbits=16, n_iter=20_000, seed=0)
    top, bottom, se_top, _ = centre_exponents_vector(perturbed, n_orbits=16, n_iter=20_000, seed=5)
    assert abs(top - est.lambda_plus) < 4 * (se_top + est.stderr_plus) + 1e-4
    assert abs(top + bottom) < 1e-10


def test_reproducible_and_worker_independent(perturbed):
    a = centre_exponents(perturbed, n_orbits=4, n_iter=2_000, seed=9)
    b = centre_exponents(perturbed, n_orbits=4, n_iter=2_000, seed=9, workers=2)
    assert a.to_json() == b.to_json()
    c = centre_exponents(perturbed, n_orbits=4, n_iter=2_000, seed=10)
    assert c.lambda_plus != a.lambda_plus


def test_series_ends_at_estimate(perturbed):
    est = centre_exponents(perturbed, n_orbits=4, n_iter=10_000, seed=0)
    rows = est.series_rows()
    assert [r[0] for r in rows] == [1000, 10_000]
    assert rows[-1][1] == pytest.approx(max(np.mean(est.orbit_plus), np.mean(est.orbit_minus)))


def test_n_iter_floor(perturbed):
    with pytest.raises(ValueError):
        centre_exponents(perturbed, n_iter=10)


def test_adapted_norm_makes_L_isometric():
    for L in ([[0, -1], [1, 1]], [[0, -1], [1, -1]], [[1, -1], [2, -1]]):
        f = system({"kind": "affine", "L": L})
        P = adapted_centre_norm(f)
        M = P @ np.array(L, dtype=float) @ np.linalg.inv(P)
        assert np.allclose(M.T @ M, np.eye(2), atol=1e-12)


@pytest.mark.parametrize("L", [[[0, -1], [1, 0]], [[0, -1], [1, 1]], [[0, -1], [1, -1]]])
def test_bunching_affine_passes(L):
    c = certify_bunching(system({"kind": "affine", "L": L, "w": W}), grid_resolution=16)
    assert c.passed
    assert c.gamma == pytest.approx(1.0, abs=1e-12)
    assert c.gamma_hat == pytest.approx(1.0, abs=1e-12)
    assert c.nu == pytest.approx((3 - math.sqrt(5)) / 2)
    assert c.margins[0] == pytest.approx(c.nu - 1.0)


def test_bunching_strong_shear_fails():
    c = certify_bunching(system({"kind": "shear", "alpha": {"terms": [{"k": 1, "sin": 10.0}]}}), grid_resolution=16)
    assert not c.passed
    assert c.margins[0] > 0


def test_bunching_rotation_and_perturbed(perturbed):
    rot = system({"kind": "moebius", "rotation": {"const": [0.3, 0.1, 0.2], "terms": [{"k": [1, 0], "cos": [0.5, 0.2, 0.1]}]}})
    assert certify_bunching(rot, grid_resolution=16).passed
    c = certify_bunching(perturbed, grid_resolution=16)
    assert c.passed
    assert c.passed == (c.margins[0] < 0 and c.margins[1] < 0 and c.fibre_bunching_margin < 0)
