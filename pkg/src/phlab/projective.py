"""Projective centre cocycle, empirical disintegrations and the trichotomy.

Directions in a centre plane are angles theta in [0, pi).  Measures of
directions are histograms on n_bins equal bins.  Distances between them are
bounded-Lipschitz distances on the circle of doubled angles (circumference
2 pi), so one bin is 2 pi / n_bins wide in that metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import linprog

from . import _kernels as K
from .errors import SingularMatrix
from .fibred import FibredSystem

DEFAULT_BINS = 360
ATOM_THRESHOLD = 0.5
ATOM_SLACK = 0.1
# a bin is heavy when it holds this many times the uniform mass
HEAVY_FACTOR = 4.0


def projectivize(m, theta):
    """Direction of m (cos theta, sin theta), reduced into [0, pi)."""
    m = np.asarray(m, dtype=float)
    if abs(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]) == 0.0:
        raise SingularMatrix("projective action needs an invertible matrix")
    th = np.asarray(theta, dtype=float)
    u0 = m[0, 0] * np.cos(th) + m[0, 1] * np.sin(th)
    u1 = m[1, 0] * np.cos(th) + m[1, 1] * np.sin(th)
    out = np.mod(np.arctan2(u1, u0), np.pi)
    return np.where(out >= np.pi, 0.0, out)


def bin_centres(n_bins: int) -> np.ndarray:
    return (np.arange(n_bins) + 0.5) * np.pi / n_bins


def binning_width(n_bins: int) -> float:
    """Bin width in the doubled-angle metric."""
    return 2 * np.pi / n_bins


def deposit(theta, masses, n_bins: int) -> np.ndarray:
    """Histogram of weighted directions, each split linearly between the
    two nearest bin centres (mass preserving, periodic)."""
    u = np.mod(np.asarray(theta, dtype=float), np.pi) / (np.pi / n_bins) - 0.5
    # snap round-off so that directions on bin centres stay bin-exact
    u = np.where(np.abs(u - np.round(u)) < 1e-9, np.round(u), u)
    lo = np.floor(u)
    frac = u - lo
    lo = lo.astype(np.int64) % n_bins
    hi = (lo + 1) % n_bins
    out = np.bincount(lo, weights=masses * (1 - frac), minlength=n_bins)
    out += np.bincount(hi, weights=masses * frac, minlength=n_bins)
    return out


def push_histogram(h, m) -> np.ndarray:
    """Push-forward of a direction histogram by the projective action of m."""
    h = np.asarray(h, dtype=float)
    n = len(h)
    return deposit(projectivize(m, bin_centres(n)), h, n)


def bl_distance(p, q) -> float:
    """Bounded-Lipschitz distance between two histograms on the same bins.

    sup of sum f (p - q) over functions with |f| <= 1 and Lipschitz
    constant <= 1 in the doubled-angle metric, solved as a linear program.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = p / p.sum() - q / q.sum()
    n = len(d)
    h = binning_width(n)
    # f_{j+1} - f_j in [-h, h] around the circle
    rows = np.arange(n)
    D = np.zeros((n, n))
    D[rows, rows] = -1.0
    D[rows, (rows + 1) % n] = 1.0
    A = np.vstack([D, -D])
    b = np.full(2 * n, h)
    res = linprog(-d, A_ub=A, b_ub=b, bounds=[(-1.0, 1.0)] * n, method="highs")
    if not res.success:  # pragma: no cover - the feasible set is a nonempty box
        raise RuntimeError(res.message)
    return float(-res.fun)


# ------------------------------------------------------------------- atoms


@dataclass(frozen=True)
class AtomReport:
    count: int
    locations: List[float]
    masses: List[float]
    threshold: float
    slack: float


def _heavy_runs(heavy):
    """Maximal circular runs of True, as lists of indices."""
    n = len(heavy)
    if heavy.all():
        return [list(range(n))]
    if not heavy.any():
        return []
    start = int(np.argmin(heavy))  # a light bin: runs cannot wrap past it
    runs, cur = [], []
    for k in range(1, n + 1):
        j = (start + k) % n
        if heavy[j]:
            cur.append(j)
        elif cur:
            runs.append(cur)
            cur = []
    if cur:
        runs.append(cur)
    return runs


def detect_atoms(hist, threshold: float = ATOM_THRESHOLD, slack: float = ATOM_SLACK,
                 heavy_factor: float = HEAVY_FACTOR) -> AtomReport:
    """Atoms of a direction histogram.

    Adjacent heavy bins (mass above heavy_factor times uniform) form a
    cluster; a cluster is an atom when its mass is at least
    threshold - slack.  Its location is the circular mean of the cluster.
    At most two atoms can pass since masses sum to one.
    """
    h = np.asarray(hist, dtype=float)
    n = len(h)
    tot = h.sum()
    if tot <= 0:
        return AtomReport(0, [], [], threshold, slack)
    p = h / tot
    runs = _heavy_runs(p > heavy_factor / n)
    locs, masses = [], []
    centres = bin_centres(n)
    for run in runs:
        mass = float(p[run].sum())
        if mass >= threshold - slack:
            z = np.sum(p[run] * np.exp(2j * centres[run]))
            locs.append(float(np.mod(np.angle(z) / 2, np.pi)))
            masses.append(mass)
    order = np.argsort(masses)[::-1]
    return AtomReport(len(locs), [locs[i] for i in order], [masses[i] for i in order], threshold, slack)


# ---------------------------------------------------------- disintegration


@dataclass
class FibreConditional:
    hist: np.ndarray  # masses per bin, sum 1
    n_samples: int
    atoms: Optional[AtomReport] = None

    @property
    def n_bins(self) -> int:
        return len(self.hist)


@dataclass
class DisintegrationField:
    fibre_kind: str
    base_cells: int
    fibre_cells: int
    n_bins: int
    counts: np.ndarray = field(repr=False)  # (2, n_cells, n_bins) split halves
    seed: int = 0
    min_samples: int = 64
    params: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return self.counts.shape[1]

    @property
    def cell_totals(self) -> np.ndarray:
        return self.counts.sum(axis=(0, 2))

    @property
    def sparse(self) -> np.ndarray:
        return self.cell_totals < self.min_samples

    @property
    def total_samples(self) -> int:
        return int(self.cell_totals.sum())

    def histogram(self, cell: int, half: Optional[int] = None) -> np.ndarray:
        c = self.counts[:, cell].sum(axis=0) if half is None else self.counts[half, cell]
        return c.astype(float)

    def conditional(self, cell: int, with_atoms: bool = True) -> FibreConditional:
        c = self.histogram(cell)
        tot = c.sum()
        p = c / tot if tot > 0 else np.full(self.n_bins, 1.0 / self.n_bins)
        return FibreConditional(p, int(tot), detect_atoms(p) if with_atoms else None)

    def cell_of(self, f: FibredSystem, x, v) -> int:
        s = f.states(np.atleast_2d(x), np.atleast_2d(v))[0]
        return int(K.cell_index(f.params, s, self.base_cells, self.fibre_cells))

    def marginal_discrepancy(self) -> float:
        """Max relative deviation of cell occupation from uniform."""
        t = self.cell_totals.astype(float)
        return float(np.max(np.abs(t / t.mean() - 1.0)))

    def csv_rows(self):
        """(base_i, base_j, fib_i, fib_j, bin, mass) for nonzero masses."""
        nb, nf = self.base_cells, self.fibre_cells
        rows = []
        tot = self.cell_totals
        merged = self.counts.sum(axis=0)
        for cell, b in zip(*np.nonzero(merged)):
            r, f1 = divmod(int(cell), nf)
            r, f0 = divmod(r, nf)
            i0, i1 = divmod(r, nb)
            rows.append((i0, i1, f0, f1, int(b), float(merged[cell, b] / tot[cell])))
        return rows

    def header(self):
        return {
            "format": "phlab-disintegration",
            "version": 1,
            "fibre_kind": self.fibre_kind,
            "base_cells": self.base_cells,
            "fibre_cells": self.fibre_cells,
            "n_bins": self.n_bins,
            "seed": self.seed,
            "total_samples": self.total_samples,
            "sparse_cells": int(self.sparse.sum()),
            "marginal_discrepancy": self.marginal_discrepancy(),
            **self.params,
        }

    def scrambled(self, seed: int = 0, strength: float = 1.0) -> "DisintegrationField":
        """Negative control: cells shuffled and each histogram pushed by its
        own random linear map, so no invariance survives."""
        rng = np.random.default_rng(seed)
        perm = rng.permutation(self.n_cells)
        out = np.zeros(self.counts.shape, dtype=float)
        for new, old in enumerate(perm):
            a = rng.normal(size=(2, 2))
            m = np.eye(2) + strength * a
            if abs(np.linalg.det(m)) < 0.1:
                m = np.eye(2) + strength * np.array([[1.0, 0.5], [0.0, 0.5]])
            for h in range(2):
                out[h, new] = push_histogram(self.counts[h, old], m)
        return DisintegrationField(self.fibre_kind, self.base_cells, self.fibre_cells, self.n_bins, out,
                                   self.seed, self.min_samples, {**self.params, "scrambled": seed})


def empirical_disintegration(
    f: FibredSystem,
    base_cells: int = 6,
    fibre_cells: int = 6,
    n_bins: int = DEFAULT_BINS,
    n_particles: int = 4096,
    burn_in: int = 1000,
    n_steps: int = 2000,
    angles_per_particle: int = 8,
    initial_angle: Optional[float] = None,
    seed: int = 0,
    min_samples: int = 64,
) -> DisintegrationField:
    """Time-averaged ensemble estimate of the invariant disintegration.

    Particles start at seeded Lebesgue-random points, each carrying a fan
    of ``angles_per_particle`` directions (equally spaced from a random
    offset, or all equal to ``initial_angle``).  After ``burn_in`` steps
    every visit is binned by (base cell, fibre cell, direction bin).
    """
    rng = np.random.default_rng(seed)
    states = f.random_states(rng, n_particles)
    k = int(angles_per_particle)
    if initial_angle is None:
        off = rng.uniform(0, np.pi / k, size=(n_particles, 1))
        angles = off + np.arange(k)[None, :] * (np.pi / k)
    else:
        angles = np.full((n_particles, k), float(initial_angle) % np.pi)
    n_cells = base_cells**2 * fibre_cells**2
    counts = np.zeros((2, n_cells, n_bins), dtype=np.uint32)
    K.ensemble_histogram(f.params, states, angles, int(burn_in), int(n_steps), int(base_cells), int(fibre_cells),
                         int(n_bins), counts)
    params = {
        "n_particles": int(n_particles),
        "burn_in": int(burn_in),
        "n_steps": int(n_steps),
        "angles_per_particle": k,
        "initial_angle": initial_angle,
    }
    return DisintegrationField(f.fibre_kind, int(base_cells), int(fibre_cells), int(n_bins), counts, int(seed),
                               int(min_samples), params)


# ------------------------------------------------------------- invariance


@dataclass(frozen=True)
class InvarianceResiduals:
    """Mean bounded-Lipschitz mismatch of pushed and target conditionals.

    ``noise_floor`` estimates the distance expected between two independent
    estimates of the same conditional (split-half distance over sqrt 2).
    A residual passes when it is at most gate_factor (noise + bin width).
    """

    dynamics: float
    unstable: float
    stable: float
    noise_floor: float
    binning_width: float
    gate_factor: float
    n_pairs: int

    @property
    def gate(self) -> float:
        return self.gate_factor * (self.noise_floor + self.binning_width)

    @property
    def passed(self) -> bool:
        return max(self.dynamics, self.unstable, self.stable) <= self.gate

    def to_json(self):
        return {
            "dynamics": self.dynamics,
            "unstable": self.unstable,
            "stable": self.stable,
            "noise_floor": self.noise_floor,
            "binning_width": self.binning_width,
            "gate": self.gate,
            "passed": self.passed,
            "n_pairs": self.n_pairs,
        }


def _split_noise(field: DisintegrationField, cells) -> float:
    d = [bl_distance(field.histogram(c, 0), field.histogram(c, 1)) for c in cells]
    return float(np.mean(d) / math.sqrt(2)) if d else 0.0


def test_su_invariance(
    field: DisintegrationField,
    f: FibredSystem,
    n_pairs: int = 48,
    seed: int = 0,
    tol: float = 1e-9,
    leaf_range=(0.05, 0.3),
    gate_factor: float = 2.0,
) -> InvarianceResiduals:
    """Check invariance of a disintegration under dynamics and holonomies.

    For random states p, the conditional of p's cell is pushed by the
    centre Jacobian at p (and by the derivative of the unstable and stable
    holonomies from p to a random point on its leaf) and compared with the
    conditional of the image's cell.  Sparse cells are skipped.
    """
    from .base import STABLE, UNSTABLE, iterate
    from .fibred import fibre_map
    from .holonomy import derivative_holonomy

    rng = np.random.default_rng(seed)
    sparse = field.sparse
    res = {"dynamics": [], UNSTABLE: [], STABLE: []}
    used = set()
    d = f.fibre_dim
    tries = 0
    while len(res["dynamics"]) < n_pairs and tries < 20 * n_pairs:
        tries += 1
        s = f.random_states(rng, 1)[0]
        x, v = s[:2], s[2 : 2 + d]
        c = field.cell_of(f, x, v)
        if sparse[c]:
            continue
        src = field.histogram(c)
        img, J = fibre_map(f, x, v)
        targets = [("dynamics", J, iterate(f.base, x, 1), img)]
        for kind in (UNSTABLE, STABLE):
            t = rng.uniform(*leaf_range) * rng.choice([-1.0, 1.0])
            h = derivative_holonomy(f, x, v, None, kind, tol=tol, leaf_length=t)
            targets.append((kind, h.matrix, h.y, h.w))
        dists = []
        for key, m, y, w in targets:
            c2 = field.cell_of(f, y, w)
            if sparse[c2]:
                break
            dists.append((key, bl_distance(push_histogram(src, m), field.histogram(c2)), c2))
        else:
            used.add(c)
            for key, dist, c2 in dists:
                res[key].append(dist)
                used.add(c2)
    if not res["dynamics"]:
        raise ValueError("every sampled cell is sparse")
    return InvarianceResiduals(
        float(np.mean(res["dynamics"])),
        float(np.mean(res[UNSTABLE])),
        float(np.mean(res[STABLE])),
        _split_noise(field, sorted(used)),
        binning_width(field.n_bins),
        float(gate_factor),
        len(res["dynamics"]),
    )


# pytest would otherwise collect the function above from test modules that import it
test_su_invariance.__test__ = False


# ------------------------------------------------------------- trichotomy

DISTINCT = "DistinctExponents"
LINE_FIELD = "LineField"
CONFORMAL = "ConformalStructure"


@dataclass(frozen=True)
class ClassifierConfig:
    seed: int = 0
    workers: int = 1
    # exponents
    n_orbits: int = 16
    n_iter: int = 100_000
    gap_factor: float = 10.0
    gap_floor: float = 1e-3
    # disintegration
    base_cells: int = 6
    fibre_cells: int = 6
    n_bins: int = DEFAULT_BINS
    n_particles: int = 4096
    burn_in: int = 1000
    n_steps: int = 2000
    angles_per_particle: int = 8
    initial_angle: Optional[float] = None
    # gates
    atom_threshold: float = ATOM_THRESHOLD
    atom_slack: float = ATOM_SLACK
    atom_coverage: float = 0.9
    n_pairs: int = 48
    gate_factor: float = 2.0
    heavy_slack: float = 0.05
    bunching_grid: int = 32

    def doubled(self) -> "ClassifierConfig":
        """Every resolution parameter doubled."""
        from dataclasses import replace

        return replace(
            self,
            n_orbits=2 * self.n_orbits,
            n_iter=2 * self.n_iter,
            base_cells=2 * self.base_cells,
            fibre_cells=2 * self.fibre_cells,
            n_bins=2 * self.n_bins,
            n_particles=2 * self.n_particles,
            n_steps=2 * self.n_steps,
            n_pairs=2 * self.n_pairs,
            bunching_grid=2 * self.bunching_grid,
        )

    def to_json(self):
        from dataclasses import asdict

        return asdict(self)


@dataclass
class TrichotomyReport:
    verdict: Optional[str]
    line_count: Optional[int]
    exponents: dict
    gap_threshold: float
    symplectic: Optional[dict] = None
    atoms: Optional[dict] = None
    residuals: Optional[dict] = None
    barycentre: Optional[dict] = None
    bunching: Optional[dict] = None
    warnings: List[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    # not serialised: kept for downstream use
    disintegration: Optional[DisintegrationField] = field(default=None, repr=False)
    barycentre_field: object = field(default=None, repr=False)

    @property
    def label(self) -> str:
        if self.verdict == LINE_FIELD:
            return f"{LINE_FIELD}({self.line_count})"
        return str(self.verdict)

    def to_json(self):
        return {
            "verdict": self.verdict,
            "label": self.label,
            "line_count": self.line_count,
            "exponents": self.exponents,
            "gap_threshold": self.gap_threshold,
            "symplectic": self.symplectic,
            "atoms": self.atoms,
            "residuals": self.residuals,
            "barycentre": self.barycentre,
            "bunching": self.bunching,
            "warnings": list(self.warnings),
            "config": self.config,
        }


def _atom_summary(field: DisintegrationField, cfg: ClassifierConfig):
    counts = []
    top = []
    for c in np.flatnonzero(~field.sparse):
        a = detect_atoms(field.histogram(int(c)), cfg.atom_threshold, cfg.atom_slack)
        counts.append(a.count)
        top.append(a.masses[0] if a.masses else 0.0)
    counts = np.array(counts)
    hist = np.bincount(counts, minlength=3)
    with_atoms = counts > 0
    coverage = float(with_atoms.mean()) if counts.size else 0.0
    mode = int(np.argmax(hist[1:]) + 1) if with_atoms.any() else 0
    return {
        "coverage": coverage,
        "count_histogram": [int(h) for h in hist],
        "mode_count": mode,
        "mean_top_mass": float(np.mean(top)) if top else 0.0,
        "threshold": cfg.atom_threshold,
        "slack": cfg.atom_slack,
        "required_coverage": cfg.atom_coverage,
    }


def classify_trichotomy(f: FibredSystem, config: Optional[ClassifierConfig] = None) -> TrichotomyReport:
    """Decide which alternative of the trichotomy the system exhibits.

    The branches are tried in order: a significant exponent gap, then
    atoms in almost every conditional (an invariant line field), then an
    su-invariant disintegration with a continuous barycentre field.  When
    every gate fails, Inconclusive is raised with the report attached.
    """
    from .conformal import barycentre_field
    from .errors import HeavyAtom, Inconclusive
    from .lyapunov import centre_exponents, certify_bunching, gap_threshold, symmetry_holds

    cfg = config or ClassifierConfig()
    warnings: List[str] = []
    cert = certify_bunching(f, grid_resolution=cfg.bunching_grid, seed=cfg.seed)
    if not cert.passed:
        warnings.append("centre bunching not certified; holonomies may fail to be C1")

    est = centre_exponents(f, n_orbits=cfg.n_orbits, n_iter=cfg.n_iter, seed=cfg.seed, workers=cfg.workers)
    thr = gap_threshold(est, cfg.gap_factor, cfg.gap_floor)
    report = TrichotomyReport(None, None, est.to_json(), thr, bunching=cert.to_json(),
                              warnings=warnings, config=cfg.to_json())
    if est.gap > thr:
        report.verdict = DISTINCT
        if f.volume_preserving:
            ok = symmetry_holds(est) and est.lambda_plus > 0 > est.lambda_minus
            report.symplectic = {"symmetric": bool(symmetry_holds(est)), "residual": est.lambda_plus + est.lambda_minus,
                                 "hyperbolic": bool(est.lambda_plus > 0 > est.lambda_minus)}
            if not ok:
                warnings.append("area-preserving cocycle but exponents are not symmetric about zero")
        return report

    field = empirical_disintegration(
        f, cfg.base_cells, cfg.fibre_cells, cfg.n_bins, cfg.n_particles, cfg.burn_in, cfg.n_steps,
        cfg.angles_per_particle, cfg.initial_angle, cfg.seed,
    )
    report.disintegration = field
    if field.sparse.any():
        warnings.append(f"{int(field.sparse.sum())} sparse cells skipped")
    atoms = _atom_summary(field, cfg)
    report.atoms = atoms
    if atoms["coverage"] >= cfg.atom_coverage:
        report.verdict = LINE_FIELD
        report.line_count = atoms["mode_count"]
        return report

    res = test_su_invariance(field, f, cfg.n_pairs, cfg.seed, gate_factor=cfg.gate_factor)
    report.residuals = res.to_json()
    try:
        bf = barycentre_field(field, heavy_slack=cfg.heavy_slack)
    except HeavyAtom as e:
        report.barycentre = {"error": str(e), "cell": e.cell}
        raise _inconclusive(Inconclusive, report, f"heavy atom without a line field: {e}")
    report.barycentre = bf.to_json()
    report.barycentre_field = bf
    if not res.passed:
        raise _inconclusive(Inconclusive, report, f"su-invariance residuals above gate {res.gate:.3g}")
    report.verdict = CONFORMAL
    return report


def _inconclusive(cls, report, msg):
    err = cls(msg)
    err.report = report
    return err
