"""Centre Lyapunov exponents and bunching certificates."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy.stats import qmc

from . import _kernels as K
from .errors import NotElliptic, RenormalizationFault
from .fibred import TORUS, FibredSystem, elliptic_order, system_from_json

DEFAULT_GAP_FACTOR = 10.0
DEFAULT_GAP_FLOOR = 1e-3
SYMMETRY_FLOOR = 1e-12


@dataclass(frozen=True)
class ExponentEstimate:
    lambda_plus: float
    lambda_minus: float
    stderr_plus: float
    stderr_minus: float
    n_iter: int
    n_orbits: int
    seed: int
    # per-orbit values, in orbit order
    orbit_plus: np.ndarray = field(repr=False)
    orbit_minus: np.ndarray = field(repr=False)
    # (1/n) sum log|det| per orbit: the exponent sum, telescoped
    orbit_logdet: np.ndarray = field(repr=False)
    checkpoints: np.ndarray = field(repr=False)
    # orbit-averaged top exponent at each checkpoint
    series_plus: np.ndarray = field(repr=False)

    @property
    def gap(self) -> float:
        return self.lambda_plus - self.lambda_minus

    @property
    def stderr_gap(self) -> float:
        return float(np.std(self.orbit_plus - self.orbit_minus, ddof=1) / math.sqrt(self.n_orbits)) \
            if self.n_orbits > 1 else 0.0

    @property
    def mean_logdet(self) -> float:
        return float(np.mean(self.orbit_logdet))

    def to_json(self):
        return {
            "lambda_plus": self.lambda_plus,
            "lambda_minus": self.lambda_minus,
            "stderr_plus": self.stderr_plus,
            "stderr_minus": self.stderr_minus,
            "n_iter": self.n_iter,
            "n_orbits": self.n_orbits,
            "seed": self.seed,
            "gap": self.gap,
            "stderr_gap": self.stderr_gap,
            "mean_logdet": self.mean_logdet,
        }

    def series_rows(self):
        """(n, lambda_plus estimate) rows for convergence tables."""
        return [(int(n), float(v)) for n, v in zip(self.checkpoints, self.series_plus)]


def _orbit_starts(f: FibredSystem, n_orbits: int, seed: int):
    """Initial states and frame angles, one independent stream per orbit."""
    children = np.random.SeedSequence(seed).spawn(n_orbits)
    states = np.empty((n_orbits, 5))
    angles = np.empty(n_orbits)
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        states[i] = f.random_states(rng, 1)[0]
        angles[i] = rng.uniform(0.0, np.pi)
    return states, angles


def _default_checkpoints(n_iter):
    cps = []
    n = 1000
    while n < n_iter:
        cps.append(n)
        n *= 10
    cps.append(n_iter)
    return np.array(sorted(set(cps)), dtype=np.int64)


def _run_orbits(P, states, angles, n_iter, checkpoints):
    n = len(states)
    out = np.empty((n, 3))
    cps = np.empty((n, len(checkpoints)))
    faults = np.zeros(n, dtype=bool)
    for i in range(n):
        s1, s2, sd, cp, fault = K.qr_orbit(P, states[i], angles[i], n_iter, checkpoints)
        out[i] = (s1 / n_iter, s2 / n_iter, sd / n_iter)
        cps[i] = cp
        faults[i] = fault
    return out, cps, faults


def _worker(args):
    spec, frame_twist, states, angles, n_iter, checkpoints = args
    f = system_from_json(spec)
    if frame_twist:
        f = f.with_frame_twist(frame_twist)
    return _run_orbits(f.params, states, angles, n_iter, checkpoints)


def centre_exponents(
    f: FibredSystem,
    n_orbits: int = 32,
    n_iter: int = 1_000_000,
    seed: int = 0,
    workers: int = 1,
    checkpoints=None,
) -> ExponentEstimate:
    """Extremal centre exponents by per-step Gram-Schmidt renormalization.

    Orbits start at seeded Lebesgue-random points with random initial
    frames.  Results depend only on ``seed``, never on ``workers``: every
    orbit has its own seed stream and the reduction runs in orbit order.
    """
    if n_iter < 1000:
        raise ValueError("n_iter must be at least 1000")
    states, angles = _orbit_starts(f, n_orbits, seed)
    cps = _default_checkpoints(n_iter) if checkpoints is None else np.asarray(checkpoints, dtype=np.int64)
    if workers > 1 and n_orbits > 1:
        chunks = np.array_split(np.arange(n_orbits), min(workers, n_orbits))
        frame_twist = f.frame_twist
        jobs = [(f.spec, frame_twist, states[c], angles[c], n_iter, cps) for c in chunks]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_worker, jobs))
        out = np.concatenate([p[0] for p in parts])
        cpv = np.concatenate([p[1] for p in parts])
        faults = np.concatenate([p[2] for p in parts])
    else:
        out, cpv, faults = _run_orbits(f.params, states, angles, n_iter, cps)
    if faults.any():
        raise RenormalizationFault(f"non-finite cocycle growth on {int(faults.sum())} orbits")
    plus = out[:, 0]
    minus = out[:, 1]
    se = (lambda a: float(np.std(a, ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0)
    lp = float(np.mean(plus))
    lm = float(np.mean(minus))
    return ExponentEstimate(
        lambda_plus=max(lp, lm),
        lambda_minus=min(lp, lm),
        stderr_plus=se(plus),
        stderr_minus=se(minus),
        n_iter=int(n_iter),
        n_orbits=int(n_orbits),
        seed=int(seed),
        orbit_plus=plus,
        orbit_minus=minus,
        orbit_logdet=out[:, 2],
        checkpoints=cps,
        series_plus=cpv.mean(axis=0),
    )


def centre_exponents_vector(
    f: FibredSystem, n_orbits: int = 32, n_iter: int = 100_000, seed: int = 1, renorm_every: int = 8
):
    """Second estimator: top exponent from vector iteration, the sum from
    the determinant (exterior square), the bottom one as their difference.

    Returns (lambda_plus, lambda_minus, stderr_plus, stderr_minus).
    """
    states, angles = _orbit_starts(f, n_orbits, seed)
    tops = np.empty(n_orbits)
    sums = np.empty(n_orbits)
    for i in range(n_orbits):
        top, ext = K.vector_orbit(f.params, states[i], angles[i], n_iter, renorm_every)
        tops[i] = top / n_iter
        sums[i] = ext / n_iter
    bottoms = sums - tops
    se = lambda a: float(np.std(a, ddof=1) / math.sqrt(len(a)))
    return float(tops.mean()), float(bottoms.mean()), se(tops), se(bottoms)


def check_symplectic_symmetry(est: ExponentEstimate) -> float:
    """|lambda_+ + lambda_-|; zero for area-preserving centre cocycles."""
    return abs(est.lambda_plus + est.lambda_minus)


def symmetry_holds(est: ExponentEstimate, factor: float = 3.0) -> bool:
    """Residual within ``factor`` combined standard errors (with a tiny
    absolute floor for cocycles whose spread vanishes)."""
    bound = factor * (est.stderr_plus + est.stderr_minus) + SYMMETRY_FLOOR
    return check_symplectic_symmetry(est) <= bound


def gap_threshold(est: ExponentEstimate, factor: float = DEFAULT_GAP_FACTOR, floor: float = DEFAULT_GAP_FLOOR):
    return max(factor * est.stderr_gap, floor)


def gap_significant(est: ExponentEstimate, factor: float = DEFAULT_GAP_FACTOR, floor: float = DEFAULT_GAP_FLOOR):
    return est.gap > gap_threshold(est, factor, floor)


# ------------------------------------------------------------------ bunching


@dataclass(frozen=True)
class BunchingCertificate:
    nu: float
    nu_hat: float
    gamma: float
    gamma_hat: float
    margins: tuple
    fibre_bunching_margin: float
    passed: bool
    n_iter_check: int
    n_samples: int
    lipschitz_slack: float

    def to_json(self):
        d = asdict(self)
        d["margins"] = list(self.margins)
        return d


def _sample_states(f: FibredSystem, n_samples: int, seed: int = 0):
    d = 4
    m = int(math.ceil(math.log2(max(n_samples, 2))))
    u = qmc.Sobol(d, scramble=True, seed=seed).random_base2(m)
    x = u[:, :2]
    if f.fibre_kind == TORUS:
        v = u[:, 2:4]
    else:
        z = 2.0 * u[:, 2] - 1.0
        ph = 2.0 * np.pi * u[:, 3]
        r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        v = np.stack([r * np.cos(ph), r * np.sin(ph), z], axis=1)
    return f.states(x, v), d


def _singular_values(M):
    s = np.linalg.svd(M, compute_uv=False)
    return s[:, 0], s[:, -1]


def adapted_centre_norm(f: FibredSystem) -> np.ndarray:
    """Square root P of an inner product in which the linear part of the
    fibre map is an isometry.

    For torus fibres with elliptic L this averages the Euclidean form over
    the finite group generated by L; elsewhere it is the identity (sphere
    frames are already orthonormal and rotations act isometrically).
    Centre derivatives are measured as P J P^-1.
    """
    if f.fibre_kind != TORUS or f.L is None:
        return np.eye(2)
    try:
        order = elliptic_order(f.L)
    except NotElliptic:
        return np.eye(2)
    L = np.asarray(f.L, dtype=float)
    Q = np.zeros((2, 2))
    Lk = np.eye(2)
    for _ in range(order):
        Q += Lk.T @ Lk
        Lk = L @ Lk
    w, V = np.linalg.eigh(Q / order)
    return (V * np.sqrt(w)) @ V.T


def _adapted_jacobians(f, P, states, n):
    M = K.batch_jacobian_n(f.params, states, n)
    return P @ M @ np.linalg.inv(P)


def certify_bunching(
    f: FibredSystem, grid_resolution: int = 64, n_iter_check: int = 1, probe: float = 1e-4, seed: int = 0
) -> BunchingCertificate:
    """Empirical centre-bunching certificate.

    Rates are per iterate, taken from n_iter_check-step derivatives in the
    adapted centre norm (see :func:`adapted_centre_norm`): gamma is the
    smallest singular value and 1/gamma_hat the largest, over
    grid_resolution**3 low-discrepancy samples of base x fibre.  The base
    rates are exact: nu = |lambda_s|, nu_hat = 1/|lambda_u|.  Sample gaps
    are covered by a Lipschitz slack estimated from paired probes at
    distance ``probe``, times the sample dispersion.

    One step is the natural choice: multi-step derivatives see the base
    expansion in their Lipschitz constants, so the slack grows like
    lambda_u**n while the margins do not.
    """
    n = int(n_iter_check)
    P = adapted_centre_norm(f)
    states, d = _sample_states(f, grid_resolution**3, seed)
    M = _adapted_jacobians(f, P, states, n)
    smax, smin = _singular_values(M)
    # Lipschitz probe: perturb each sample in a random direction
    rng = np.random.default_rng(seed + 1)
    dirs = rng.normal(size=(len(states), 4))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    disp = math.sqrt(d) / (2.0 * len(states) ** (1.0 / d))
    h = probe
    pert = states.copy()
    pert[:, :4] += h * dirs
    if f.fibre_kind != TORUS:
        pert[:, 2:5] /= np.linalg.norm(pert[:, 2:5], axis=1, keepdims=True)
    pert = f.states(pert[:, :2], pert[:, 2 : 2 + f.fibre_dim])
    smax2, smin2 = _singular_values(_adapted_jacobians(f, P, pert, n))
    lip = max(np.max(np.abs(smax2 - smax)), np.max(np.abs(smin2 - smin))) / h
    slack = float(lip * disp)
    lo = max(float(smin.min()) - slack, 1e-300)
    hi = float(smax.max()) + slack
    gamma = lo ** (1.0 / n)
    gamma_hat = 1.0 / hi ** (1.0 / n)
    nu = abs(f.base.lambda_s)
    nu_hat = 1.0 / abs(f.base.lambda_u)
    m1 = nu - gamma * gamma_hat
    m2 = nu_hat - gamma * gamma_hat
    kappa = ((smax + slack) / np.maximum(smin - slack, 1e-300)) ** (1.0 / n)
    fb = float(max(np.max(kappa * nu - 1.0), np.max(kappa * nu_hat - 1.0)))
    passed = bool(m1 < 0 and m2 < 0 and fb < 0)
    return BunchingCertificate(nu, nu_hat, gamma, gamma_hat, (m1, m2), fb, passed, n, len(states), slack)


# ----------------------------------------------------------------- diagnostics


def continuity_probe(spec: dict, eps_values: List[float], n_orbits: int = 8, n_iter: int = 20_000, seed: int = 0):
    """Exponent estimates along a perturbation path eps -> spec(eps).

    Only a diagnostic: finite samples cannot certify continuity.
    """
    rows = []
    for eps in eps_values:
        s = {**spec, "fibre": {**spec["fibre"], "eps": float(eps)}}
        est = centre_exponents(system_from_json(s), n_orbits=n_orbits, n_iter=n_iter, seed=seed)
        rows.append((float(eps), est.lambda_plus, est.lambda_minus, est.stderr_plus))
    return rows
