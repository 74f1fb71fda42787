"""Uniformizing conformal structures on torus fibres and recovering models.

The fibre torus R^2 / Z^2 carries the complex coordinate z = v0 + i v1.  A
measurable conformal structure is described by its Beltrami coefficient mu
on an N x N grid.  The solver finds the normalised mu-conformal map

    W(z) = (z + B conj(z) + psi(z) - psi(0)) / (1 + B),    psi periodic,

with W(0) = 0 and W(z + 1) = W(z) + 1.  Its other period W(z + i) - W(z)
is the lattice parameter tau.

A structure point t of the upper half-plane (inner product
|v0 - conj(t) v1|^2 up to scale) has Beltrami coefficient
(1 - i conj(t)) / (1 + i conj(t)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import _kernels as K
from .errors import DegenerateLattice, NoConvergence, SupMuTooLarge

MAX_SUP_MU = 0.95
DEFAULT_N = 128
MAX_BELTRAMI_ITER = 500
# spectral modes below this magnitude are dropped for off-grid evaluation
MODE_CUTOFF = 1e-15


def _wavenumbers(N: int):
    k = np.fft.fftfreq(N, 1.0 / N)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    return k1 + 1j * k2


def grid_points(N: int) -> np.ndarray:
    """Complex grid z = (j + i k) / N, indexed [j, k]."""
    g = np.arange(N) / N
    return g[:, None] + 1j * g[None, :]


def mu_of_structure(t):
    """Beltrami coefficient of the structure point(s) t."""
    tb = 1j * np.conj(np.asarray(t, dtype=complex))
    return (1 - tb) / (1 + tb)


def structure_of_mu(mu):
    """Inverse of :func:`mu_of_structure`."""
    mu = np.asarray(mu, dtype=complex)
    return np.conj((1 - mu) / (1 + mu) / 1j)


@dataclass
class BeltramiGrid:
    mu: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=complex)
        N = self.mu.shape[0]
        if self.mu.shape != (N, N) or N < 4 or N & (N - 1):
            raise ValueError("mu must be an N x N grid with N a power of two")

    @property
    def N(self) -> int:
        return self.mu.shape[0]

    @property
    def sup_mu(self) -> float:
        return float(np.abs(self.mu).max())

    @classmethod
    def from_function(cls, fn, N: int = DEFAULT_N) -> "BeltramiGrid":
        z = grid_points(N)
        return cls(np.broadcast_to(np.asarray(fn(z.real, z.imag), dtype=complex), (N, N)).copy())


@dataclass
class PeriodicQcMap:
    """Normalised solution of a periodic Beltrami equation."""

    mu: np.ndarray = field(repr=False)
    B: complex
    psi_hat: np.ndarray = field(repr=False)  # FFT of the mean-zero periodic part
    residual: float
    iterations: int
    trace: List[float] = field(repr=False)

    @property
    def N(self) -> int:
        return self.mu.shape[0]

    @property
    def psi(self) -> np.ndarray:
        return np.fft.ifft2(self.psi_hat)

    @property
    def psi0(self) -> complex:
        return complex(self.psi_hat.sum() / self.N**2)

    @property
    def tau(self) -> complex:
        return complex(1j * (1 - self.B) / (1 + self.B))

    def values(self) -> np.ndarray:
        """W on the grid."""
        z = grid_points(self.N)
        return (z + self.B * np.conj(z) + self.psi - self.psi0) / (1 + self.B)

    def derivatives(self):
        """(W_z, W_zbar) on the grid, spectrally."""
        kap = _wavenumbers(self.N)
        pz = np.fft.ifft2(np.pi * 1j * np.conj(kap) * self.psi_hat)
        pzb = np.fft.ifft2(np.pi * 1j * kap * self.psi_hat)
        return (1 + pz) / (1 + self.B), (self.B + pzb) / (1 + self.B)

    def _modes(self):
        if not hasattr(self, "_mode_cache"):
            N = self.N
            c = self.psi_hat / N**2
            keep = np.abs(c) > MODE_CUTOFF * max(1.0, float(np.abs(c).max()))
            k = np.fft.fftfreq(N, 1.0 / N)
            k1, k2 = np.meshgrid(k, k, indexing="ij")
            self._mode_cache = (k1[keep], k2[keep], c[keep])
        return self._mode_cache

    def periodic_part(self, v) -> np.ndarray:
        """psi at fibre points v (..., 2), by direct Fourier summation."""
        v = np.asarray(v, dtype=float)
        k1, k2, c = self._modes()
        if c.size == 0:
            return np.zeros(v.shape[:-1], dtype=complex)
        flat = v.reshape(-1, 2)
        out = np.empty(len(flat), dtype=complex)
        for s in range(0, len(flat), 1024):
            ph = np.exp(2j * np.pi * (np.outer(flat[s : s + 1024, 0], k1) + np.outer(flat[s : s + 1024, 1], k2)))
            out[s : s + 1024] = ph @ c
        return out.reshape(v.shape[:-1])

    def __call__(self, v) -> np.ndarray:
        """W at lifted fibre points v (..., 2); exact on lattice translates."""
        v = np.asarray(v, dtype=float)
        z = v[..., 0] + 1j * v[..., 1]
        return (z + self.B * np.conj(z) + self.periodic_part(v) - self.psi0) / (1 + self.B)

    def fd_residual(self) -> float:
        """Beltrami residual from 4th-order finite differences of W."""
        N = self.N
        h = 1.0 / N
        p = self.psi

        def d(a, axis):
            return (-np.roll(a, -2, axis) + 8 * np.roll(a, -1, axis) - 8 * np.roll(a, 1, axis)
                    + np.roll(a, 2, axis)) / (12 * h)

        px, py = d(p, 0), d(p, 1)
        wz = (1 + 0.5 * (px - 1j * py)) / (1 + self.B)
        wzb = (self.B + 0.5 * (px + 1j * py)) / (1 + self.B)
        return float(np.abs(wzb - self.mu * wz).max())

    def to_json(self):
        return {
            "N": self.N,
            "normalization": "W(0)=0, W(1)=1",
            "residual": self.residual,
            "iterations": self.iterations,
            "B": [self.B.real, self.B.imag],
            "tau": [self.tau.real, self.tau.imag],
        }


def solve_beltrami_periodic(mu, tol: float = 1e-10, max_iter: int = MAX_BELTRAMI_ITER) -> PeriodicQcMap:
    """mu-conformal self-map of the square torus.

    Writes the unnormalised solution as z + B conj(z) + psi and iterates
    psi_zbar = mu (1 + psi_z) - B, with B the mean of mu (1 + psi_z) and
    psi_z obtained from psi_zbar by the Fourier multiplier conj(k)/k.  Each
    sweep contracts by sup |mu|; the stopping rule is the grid residual of
    the Beltrami equation.
    """
    grid = mu if isinstance(mu, BeltramiGrid) else BeltramiGrid(mu)
    if grid.sup_mu >= MAX_SUP_MU:
        raise SupMuTooLarge(f"sup|mu| = {grid.sup_mu:.4f} >= {MAX_SUP_MU}")
    m = grid.mu
    N = grid.N
    kap = _wavenumbers(N)
    nz = kap != 0
    ratio = np.zeros_like(kap)
    ratio[nz] = np.conj(kap[nz]) / kap[nz]
    g = np.zeros((N, N), dtype=complex)  # psi_z
    h = m * (1 + g)
    trace: List[float] = []
    for it in range(1, max_iter + 1):
        B = h.mean()
        qh = np.fft.fft2(h - B)
        g = np.fft.ifft2(ratio * qh)
        h_new = m * (1 + g)
        res = float(np.abs(h_new - h).max() / abs(1 + B))
        trace.append(res)
        h = h_new
        if res < tol:
            break
        if it > 20 and res > 0.999 * trace[-11]:
            raise NoConvergence(f"Beltrami residual stalled at {res:.3g}; trace {trace[-5:]}")
    else:
        raise NoConvergence(f"Beltrami residual {trace[-1]:.3g} after {max_iter} sweeps")
    # psi from the last psi_zbar; B is consistent with it
    B = h.mean()
    qh = np.fft.fft2(h - B)
    psi_hat = np.zeros_like(qh)
    psi_hat[nz] = qh[nz] / (np.pi * 1j * kap[nz])
    out = PeriodicQcMap(m, complex(B), psi_hat, 0.0, it, trace)
    wz, wzb = out.derivatives()
    out.residual = float(np.abs(wzb - m * wz).max())
    return out


@dataclass(frozen=True)
class LatticeParam:
    tau: complex

    def to_json(self):
        return {"tau": [self.tau.real, self.tau.imag]}


def lattice_parameter(w: PeriodicQcMap, min_imag: float = 1e-6) -> LatticeParam:
    """Period of W along i, divided by its period along 1 (which is 1)."""
    t = w.tau
    if t.imag < min_imag:
        raise DegenerateLattice(f"Im tau = {t.imag:.3g}")
    return LatticeParam(t)


# ------------------------------------------------------- structure fields


def mu_from_cells(tau_cells, N: int = DEFAULT_N) -> BeltramiGrid:
    """Smooth Beltrami data from structures sampled at fibre cell centres.

    The cell values are trigonometrically interpolated (Nyquist modes of an
    even cell count are dropped) and sampled on the N x N solver grid.
    """
    mu_c = mu_of_structure(np.asarray(tau_cells, dtype=complex))
    nf = mu_c.shape[0]
    chat = np.fft.fft2(mu_c) / nf**2
    k = np.fft.fftfreq(nf, 1.0 / nf)
    keep = np.abs(k) < nf / 2
    k = k[keep]
    chat = chat[np.ix_(keep, keep)]
    g = np.arange(N) / N - 0.5 / nf
    E = np.exp(2j * np.pi * np.outer(g, k))
    return BeltramiGrid(E @ chat @ E.T)


def _structure_grids(bf):
    """tau of each base cell as an (nf, nf) array, from a BarycentreField."""
    nb0, nb1, nf0, nf1 = bf.shape
    t = bf.tau.reshape(nb0, nb1, nf0, nf1)
    if np.isnan(t).any():
        fill = bf.median
        t = np.where(np.isnan(t), fill, t)
    return t


def _lift_grid(img):
    """Continuous lift of wrapped torus values on a fibre grid (fg, fg, 2)."""
    out = img.copy()
    out[0] = np.unwrap(out[0], period=1.0, axis=0)
    return np.unwrap(out, period=1.0, axis=0)


def _lattice_matrix(t: complex) -> np.ndarray:
    """Real 2x2 matrix whose columns are the periods 1 and t."""
    return np.array([[1.0, t.real], [0.0, t.imag]])


def _real_part_matrix(a: complex, c: complex) -> np.ndarray:
    """zeta -> a zeta + c conj(zeta) as a real 2x2 matrix."""
    return np.array([[a.real + c.real, c.imag - a.imag], [a.imag + c.imag, a.real - c.real]])


@dataclass(frozen=True)
class ExtractionConfig:
    # structure field used for uniformization
    structure_base_cells: int = 1
    structure_fibre_cells: int = 1
    n_particles: int = 4096
    burn_in: int = 1000
    # a multiple of 12 averages whole periods of every elliptic order
    n_steps: int = 2400
    # fine bins: the barycentre's binning error scales like the bin width squared
    n_bins: int = 16384
    seed: int = 0
    # solver and fits
    beltrami_N: int = 64
    beltrami_tol: float = 1e-10
    model_grid: int = 8
    fibre_grid: int = 32
    # gates
    integer_gate: float = 1e-3
    a_gate: float = 1e-3
    defect_gate: float = 1e-3

    def to_json(self):
        from dataclasses import asdict

        return asdict(self)


@dataclass
class AffineModelReport:
    L: np.ndarray
    base_points: np.ndarray = field(repr=False)  # (n, 2)
    a: np.ndarray = field(repr=False)  # holomorphic coefficient per base point
    b: np.ndarray = field(repr=False)
    w_model: np.ndarray = field(repr=False)  # (n, 2) translation in torus coordinates
    max_defect: float
    max_abs_a_deviation: float
    a_oscillation: float
    integer_defect: float
    lattice_tau: np.ndarray = field(repr=False)  # per structure base cell
    tau_oscillation: float
    beltrami_residual: float
    verdict: Optional[str] = None

    @property
    def trace(self) -> int:
        return int(np.trace(self.L))

    @property
    def order(self) -> int:
        from .fibred import elliptic_order

        return elliptic_order(self.L)

    def to_json(self):
        return {
            "L": self.L.tolist(),
            "trace": self.trace,
            "order": self.order,
            "max_defect": self.max_defect,
            "max_abs_a_deviation": self.max_abs_a_deviation,
            "a_oscillation": self.a_oscillation,
            "integer_defect": self.integer_defect,
            "lattice_tau": [[complex(t).real, complex(t).imag] for t in self.lattice_tau],
            "tau_oscillation": self.tau_oscillation,
            "beltrami_residual": self.beltrami_residual,
            "verdict": self.verdict,
            "base_points": self.base_points.tolist(),
            "a": [[z.real, z.imag] for z in self.a],
            "w_model": self.w_model.tolist(),
        }


def _require_conformal(f, verdict, classifier):
    from .errors import NotConformalVerdict
    from .projective import CONFORMAL, classify_trichotomy

    if verdict is None:
        verdict = classify_trichotomy(f, classifier).label
    if verdict != CONFORMAL:
        raise NotConformalVerdict(f"classifier verdict is {verdict}")
    return verdict


def structure_field_for(f, cfg: ExtractionConfig):
    """Barycentre field at the (coarse) resolution used for uniformization."""
    from .conformal import barycentre_field
    from .projective import empirical_disintegration

    d = empirical_disintegration(f, cfg.structure_base_cells, cfg.structure_fibre_cells, cfg.n_bins, cfg.n_particles,
                                 cfg.burn_in, cfg.n_steps, seed=cfg.seed)
    return barycentre_field(d)


def extract_affine_model(f, structures=None, config: Optional[ExtractionConfig] = None, verdict: Optional[str] = None,
                         classifier=None, check_verdict: bool = True) -> AffineModelReport:
    """Recover (g(x), L v + w(x)) from a torus system with an invariant structure.

    Each structure base cell is uniformized by a periodic Beltrami solve.
    Over a grid of base points the fibre map is conjugated through the
    uniformizing maps of x and g(x) and fitted by an affine map of the
    plane; the integer matrix L is read off in the lattice bases.
    """
    from .base import iterate
    from .errors import ConfigInvalid, FitDefectExceeded, NonConstantA, NotInteger
    from .fibred import TORUS, evaluate

    cfg = config or ExtractionConfig()
    if f.fibre_kind != TORUS:
        raise ConfigInvalid("affine models need a torus fibre")
    if check_verdict:
        verdict = _require_conformal(f, verdict, classifier)
    bf = structures if structures is not None else structure_field_for(f, cfg)
    grids = _structure_grids(bf)
    nb = grids.shape[0]
    maps = {}
    for i in range(nb):
        for j in range(grids.shape[1]):
            maps[i, j] = solve_beltrami_periodic(mu_from_cells(grids[i, j], cfg.beltrami_N), cfg.beltrami_tol)
    taus = np.array([m.tau for m in maps.values()])
    for m in maps.values():
        lattice_parameter(m)
    from .conformal import halfplane_distance

    tau_osc = float(np.max(halfplane_distance(taus[:, None], taus[None, :])))

    def cell(x):
        return (min(int(x[0] * nb), nb - 1), min(int(x[1] * grids.shape[1]), grids.shape[1] - 1))

    G, fg = cfg.model_grid, cfg.fibre_grid
    g1 = (np.arange(G) + 0.5) / G
    base_pts = np.stack(np.meshgrid(g1, g1, indexing="ij"), -1).reshape(-1, 2)
    gf = (np.arange(fg) + 0.5) / fg
    V = np.stack(np.meshgrid(gf, gf, indexing="ij"), -1)
    Vf = V.reshape(-1, 2)
    a_all, b_all, w_all, defects, Ms = [], [], [], [], []
    for x in base_pts:
        Wx = maps[cell(x)]
        gx = iterate(f.base, x, 1)
        Wg = maps[cell(gx)]
        _, img = evaluate(f, np.repeat(x[None], len(Vf), 0), Vf)
        U = _lift_grid(img.reshape(fg, fg, 2))
        z = Wx(V).ravel()
        zp = Wg(U).ravel()
        A = np.stack([z, np.ones_like(z)], 1)
        (a, b), *_ = np.linalg.lstsq(A, zp, rcond=None)
        defects.append(float(np.abs(zp - a * z - b).max()))
        A3 = np.stack([z, np.conj(z), np.ones_like(z)], 1)
        (a3, c3, b3), *_ = np.linalg.lstsq(A3, zp, rcond=None)
        Bx, Bg = _lattice_matrix(Wx.tau), _lattice_matrix(Wg.tau)
        Ms.append(np.linalg.solve(Bg, _real_part_matrix(a3, c3) @ Bx))
        pq = np.linalg.solve(Bg, [b.real, b.imag])
        pq -= np.round(pq)  # b is defined modulo the lattice
        w_all.append(np.mod(pq, 1.0))
        a_all.append(a)
        b_all.append(complex(*(Bg @ pq)))
    Ms = np.array(Ms)
    L = np.rint(Ms).astype(np.int64)
    int_def = float(np.abs(Ms - L).max())
    if int_def > cfg.integer_gate or not (L == L[0]).all():
        raise NotInteger(f"linear parts are {int_def:.3g} from integer matrices")
    a_all = np.array(a_all)
    a_med = complex(np.median(a_all.real), np.median(a_all.imag))
    a_osc = float(np.abs(a_all - a_med).max())
    if a_osc > cfg.a_gate:
        raise NonConstantA(f"holomorphic coefficient varies by {a_osc:.3g}")
    report = AffineModelReport(
        L[0], base_pts, a_all, np.array(b_all), np.array(w_all), float(max(defects)),
        float(np.abs(np.abs(a_all) - 1).max()), a_osc, int_def, taus, tau_osc,
        float(max(m.residual for m in maps.values())), verdict,
    )
    if report.max_defect > cfg.defect_gate:
        err = FitDefectExceeded(f"conjugacy defect {report.max_defect:.3g} above {cfg.defect_gate:g}")
        err.report = report
        raise err
    return report


# ------------------------------------------------------------ sphere model


def _chordal(z, w):
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    return 2 * np.abs(z - w) / np.sqrt((1 + np.abs(z) ** 2) * (1 + np.abs(w) ** 2))


def normalize_psl2c(c) -> np.ndarray:
    """Scale (a, b, c, d) to ad - bc = 1 and fix the sign ambiguity by
    making the largest coefficient have positive real part (ties: imag)."""
    c = np.asarray(c, dtype=complex)
    c = c / np.sqrt(c[0] * c[3] - c[1] * c[2])
    k = int(np.argmax(np.abs(c)))
    lead = c[k]
    if lead.real < 0 or (lead.real == 0 and lead.imag < 0):
        c = -c
    return c


def fit_moebius(z, zp) -> np.ndarray:
    """Least-squares Moebius map with zp = (a z + b)/(c z + d)."""
    z = np.asarray(z, dtype=complex)
    zp = np.asarray(zp, dtype=complex)
    A = np.stack([z, np.ones_like(z), -z * zp, -zp], 1)
    _, _, vh = np.linalg.svd(A)
    return normalize_psl2c(np.conj(vh[-1]))


def _moebius_eval(c, z):
    return (c[0] * z + c[1]) / (c[2] * z + c[3])


def _chart_samples(n: int, r_min: float, r_max: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    r = np.exp(rng.uniform(np.log(r_min), np.log(r_max), n))
    return r * np.exp(2j * np.pi * rng.random(n))


@dataclass
class MoebiusModelReport:
    base_points: np.ndarray = field(repr=False)
    coefficients: np.ndarray = field(repr=False)  # (n, 4) normalised (a, b, c, d)
    max_defect: float
    generators: Optional[np.ndarray] = field(default=None, repr=False)
    coefficient_error: Optional[float] = None
    verdict: Optional[str] = None

    def to_json(self):
        return {
            "base_points": self.base_points.tolist(),
            "coefficients": [[[z.real, z.imag] for z in row] for row in self.coefficients],
            "max_defect": self.max_defect,
            "coefficient_error": self.coefficient_error,
            "verdict": self.verdict,
        }


def extract_moebius_model(f, model_grid: int = 8, n_fit: int = 24, n_test: int = 64, defect_gate: float = 1e-6,
                          chart=None, verdict: Optional[str] = None, classifier=None, check_verdict: bool = True,
                          seed: int = 0) -> MoebiusModelReport:
    """Fit a Moebius map to every fibre map of a sphere system.

    ``chart`` is a pair of vectorised maps (to_chart, from_chart) between unit
    vectors and the complex plane; stereographic projection from the north pole by default.
    Fits use ``n_fit`` chart points with 0.2 <= |z| <= 3 and the defect is
    the largest chordal distance on ``n_test`` further points.
    """
    from .errors import ConfigInvalid, FitDefectExceeded
    from .fibred import SPHERE, evaluate, stereographic, stereographic_inverse

    if f.fibre_kind != SPHERE:
        raise ConfigInvalid("Moebius models need a sphere fibre")
    if check_verdict:
        verdict = _require_conformal(f, verdict, classifier)
    to_chart, from_chart = chart if chart is not None else (stereographic, stereographic_inverse)
    G = model_grid
    g1 = (np.arange(G) + 0.5) / G
    base_pts = np.stack(np.meshgrid(g1, g1, indexing="ij"), -1).reshape(-1, 2)
    zf = _chart_samples(n_fit, 0.2, 3.0, seed)
    zt = _chart_samples(n_test, 0.2, 3.0, seed + 1)
    z_all = np.concatenate([zf, zt])
    pts = from_chart(z_all)
    coeffs, gens, defects = [], [], []
    for x in base_pts:
        _, img = evaluate(f, np.repeat(x[None], len(pts), 0), pts)
        zp = to_chart(img)
        c = fit_moebius(zf, zp[:n_fit])
        coeffs.append(c)
        defects.append(float(_chordal(_moebius_eval(c, zt), zp[n_fit:]).max()))
        if chart is None:
            gens.append(normalize_psl2c(K.sphere_coeffs(f.params, float(x[0]), float(x[1]))))
    coeffs = np.array(coeffs)
    report = MoebiusModelReport(base_pts, coeffs, float(max(defects)), verdict=verdict)
    if gens and f.spec_kind == "moebius":
        report.generators = np.array(gens)
        report.coefficient_error = float(np.abs(coeffs - report.generators).max())
    if report.max_defect > defect_gate:
        err = FitDefectExceeded(f"Moebius fit defect {report.max_defect:.3g} above {defect_gate:g}")
        err.report = report
        raise err
    return report
