"""Hyperbolic geometry, the conformal barycentre, and conformal structures.

Conventions
-----------
A line direction theta in [0, pi) is the boundary point r = cot(theta) of
the upper half-plane H, so a linear map A acts on directions exactly as the
Moebius map z -> (a z + b)/(c z + d) acts on the real line.  The Cayley map
C(z) = (z - i)/(z + i) sends r to exp(-2 i theta); boundary angles are
therefore doubled direction angles, with the orientation reversed.

A point tau of H stands for the conformal structure of the inner product

    Q_tau(x, y) = |x - tau y|^2 / Im(tau),

normalised to determinant one.  With this choice the push-forward of
structures by A is the same Moebius action on tau, tau = i is the
Euclidean structure, and a measure of directions and its barycentre
transform together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import HeavyAtom, NoConvergence, NotElliptic, TrivialAction
from .fibred import elliptic_order

DEFAULT_TOL = 1e-12
HEAVY_SLACK = 0.05
MAX_NEWTON = 200


# ------------------------------------------------------------- coordinates


def disc_from_halfplane(z):
    z = np.asarray(z, dtype=complex)
    return (z - 1j) / (z + 1j)


def halfplane_from_disc(w):
    w = np.asarray(w, dtype=complex)
    return 1j * (1 + w) / (1 - w)


def proj_to_circle(theta):
    """Boundary angle in [0, 2 pi) of a direction angle."""
    return np.mod(-2.0 * np.asarray(theta, dtype=float), 2 * np.pi)


def circle_to_proj(phi):
    return np.mod(-0.5 * np.asarray(phi, dtype=float), np.pi)


def disc_distance(w1, w2):
    w1 = np.asarray(w1, dtype=complex)
    w2 = np.asarray(w2, dtype=complex)
    r = np.abs(w1 - w2) / np.abs(1 - np.conj(w1) * w2)
    return 2.0 * np.arctanh(np.minimum(r, 1.0))


def halfplane_distance(z1, z2):
    z1 = np.asarray(z1, dtype=complex)
    z2 = np.asarray(z2, dtype=complex)
    r = np.abs(z1 - z2) / np.abs(z1 - np.conj(z2))
    return 2.0 * np.arctanh(np.minimum(r, 1.0))


@dataclass(frozen=True)
class MoebiusReal:
    """Element of PSL(2,R), normalised to ad - bc = 1."""

    a: float
    b: float
    c: float
    d: float

    @classmethod
    def from_matrix(cls, m) -> "MoebiusReal":
        m = np.asarray(m, dtype=float)
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if det <= 0:
            raise ValueError("orientation-preserving matrix required")
        s = 1.0 / math.sqrt(det)
        return cls(m[0, 0] * s, m[0, 1] * s, m[1, 0] * s, m[1, 1] * s)

    @property
    def matrix(self):
        return np.array([[self.a, self.b], [self.c, self.d]])

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        return (self.a * z + self.b) / (self.c * z + self.d)

    def on_disc(self, w):
        """The same map seen through the Cayley transform."""
        return disc_from_halfplane(self(halfplane_from_disc(w)))

    def on_directions(self, theta):
        th = np.asarray(theta, dtype=float)
        u0 = self.a * np.cos(th) + self.b * np.sin(th)
        u1 = self.c * np.cos(th) + self.d * np.sin(th)
        return np.mod(np.arctan2(u1, u0), np.pi)


def disc_automorphism(w, phi: float = 0.0):
    """z -> e^{i phi} (z - w) / (1 - conj(w) z)."""
    rot = np.exp(1j * phi)
    return lambda z: rot * (np.asarray(z) - w) / (1 - np.conj(w) * np.asarray(z))


# ---------------------------------------------------------------- measures


@dataclass(frozen=True)
class CircleMeasure:
    """Finite measure on the unit circle: atoms at angles with masses."""

    angles: np.ndarray
    masses: np.ndarray

    @classmethod
    def from_points(cls, zeta, masses) -> "CircleMeasure":
        return cls(np.mod(np.angle(np.asarray(zeta, dtype=complex)), 2 * np.pi), np.asarray(masses, dtype=float))

    @classmethod
    def from_directions(cls, theta, masses) -> "CircleMeasure":
        return cls(proj_to_circle(theta), np.asarray(masses, dtype=float))

    def normalized(self) -> "CircleMeasure":
        keep = self.masses > 0
        m = self.masses[keep]
        return CircleMeasure(self.angles[keep], m / m.sum())

    @property
    def points(self):
        return np.exp(1j * self.angles)

    @property
    def max_atom(self) -> float:
        """Largest mass at a single boundary point."""
        if len(self.masses) == 0:
            return 0.0
        key = np.round(np.mod(self.angles, 2 * np.pi), 12) % (2 * np.pi)
        _, inv = np.unique(key, return_inverse=True)
        tot = np.bincount(inv, weights=self.masses)
        return float(tot.max() / self.masses.sum())

    def push(self, g) -> "CircleMeasure":
        """Image under a disc automorphism g (a callable on the circle)."""
        return CircleMeasure.from_points(g(self.points), self.masses)


def disc_field(m: CircleMeasure, w):
    """xi_m(w) = sum (zeta - w) / (1 - conj(w) zeta) m(zeta)."""
    z = m.points
    return complex(np.sum(m.masses * (z - w) / (1 - np.conj(w) * z)))


def _field_and_jacobian(z, p, w):
    den = 1 - np.conj(w) * z
    g = (z - w) / den
    xi = np.sum(p * g)
    A = np.sum(p * (-1.0 / den))  # d/dw
    B = np.sum(p * (z - w) * z / den**2)  # d/d conj(w)
    J = np.array([[(A + B).real, -(A - B).imag], [(A + B).imag, (A - B).real]])
    return xi, J


def _fallback(z, p, w0, tol):
    # unconstrained coordinates u with w = u / (1 + |u|)
    def to_w(u):
        r = math.hypot(u[0], u[1])
        return complex(u[0], u[1]) / (1.0 + r)

    def obj(u):
        w = to_w(u)
        return abs(np.sum(p * (z - w) / (1 - np.conj(w) * z))) ** 2

    r0 = abs(w0)
    u0 = np.array([w0.real, w0.imag]) / max(1.0 - r0, 1e-12)
    res = minimize(obj, u0, method="Nelder-Mead", options={"xatol": 1e-14, "fatol": tol**2, "maxiter": 20000})
    return to_w(res.x)


def barycentre(m: CircleMeasure, tol: float = DEFAULT_TOL, heavy_slack: float = HEAVY_SLACK) -> complex:
    """Conformal barycentre in the disc: the unique zero of xi_m.

    Damped Newton from the Euclidean mean; steps are halved until |xi|
    decreases and the iterate stays in the disc.  Raises HeavyAtom when an
    atom carries at least 1/2 - heavy_slack of the mass.
    """
    m = m.normalized()
    if m.max_atom >= 0.5 - heavy_slack:
        raise HeavyAtom(f"atom of mass {m.max_atom:.3f} >= {0.5 - heavy_slack}")
    z = m.points
    p = m.masses
    w = complex(np.sum(p * z))
    if abs(w) >= 1:
        w = 0.0j
    xi, J = _field_and_jacobian(z, p, w)
    for _ in range(MAX_NEWTON):
        if abs(xi) < tol:
            return w
        try:
            step = np.linalg.solve(J, [-xi.real, -xi.imag])
        except np.linalg.LinAlgError:
            break
        dw = complex(step[0], step[1])
        lam = 1.0
        while lam > 1e-12:
            cand = w + lam * dw
            if abs(cand) < 1:
                xc, Jc = _field_and_jacobian(z, p, cand)
                if abs(xc) < abs(xi):
                    break
            lam *= 0.5
        else:
            break
        w, xi, J = cand, xc, Jc
    w = _fallback(z, p, w, tol)
    if abs(disc_field(m, w)) < tol:
        return w
    raise NoConvergence(f"barycentre residual {abs(disc_field(m, w)):.3g} above {tol:g}")


def local_uniqueness_probe(m: CircleMeasure, w: complex, tol: float = DEFAULT_TOL) -> bool:
    """|xi| below tol at w and above it at 8 compass points 10 tol away."""
    m = m.normalized()
    if abs(disc_field(m, w)) >= tol:
        return False
    r = 10 * tol
    ring = [w + r * np.exp(1j * k * np.pi / 4) for k in range(8)]
    return all(abs(disc_field(m, u)) > tol for u in ring)


# -------------------------------------------------------------- structures


@dataclass(frozen=True)
class ConformalStructureTau:
    tau: complex

    def __post_init__(self):
        if not self.tau.imag > 0:
            raise ValueError("tau must lie in the upper half-plane")

    @property
    def matrix(self) -> np.ndarray:
        """Determinant-one inner product |x - tau y|^2 / Im tau."""
        t = self.tau
        return np.array([[1.0, -t.real], [-t.real, abs(t) ** 2]]) / t.imag

    @classmethod
    def from_matrix(cls, Q) -> "ConformalStructureTau":
        Q = np.asarray(Q, dtype=float)
        re = -Q[0, 1] / Q[0, 0]
        im = math.sqrt(max(Q[0, 0] * Q[1, 1] - Q[0, 1] ** 2, 0.0)) / Q[0, 0]
        return cls(complex(re, im))

    def push(self, A) -> "ConformalStructureTau":
        """Structure transported by the linear map A (any sign of det)."""
        A = np.asarray(A, dtype=float)
        t = (A[0, 0] * self.tau + A[0, 1]) / (A[1, 0] * self.tau + A[1, 1])
        return ConformalStructureTau(complex(t.real, abs(t.imag)))

    def distance(self, other: "ConformalStructureTau") -> float:
        return float(halfplane_distance(self.tau, other.tau))


def structure_from_measure(angles, masses, tol: float = DEFAULT_TOL, heavy_slack: float = HEAVY_SLACK):
    """Conformal structure whose barycentre is that of a direction measure.

    ``angles`` are direction angles in [0, pi).
    """
    masses = np.asarray(masses, dtype=float)
    m = CircleMeasure.from_directions(angles, masses)
    w = barycentre(m, tol, heavy_slack)
    tau = complex(halfplane_from_disc(w))
    return ConformalStructureTau(complex(tau.real, max(tau.imag, np.finfo(float).tiny)))


def invariant_structure_of(L) -> ConformalStructureTau:
    """Fixed point in H of z -> (a z + b)/(c z + d) for elliptic L."""
    order = elliptic_order(L)
    if order <= 2:
        raise TrivialAction("+-I fixes every conformal structure")
    a, b = float(L[0][0]), float(L[0][1])
    c, d = float(L[1][0]), float(L[1][1])
    # c z^2 + (d - a) z - b = 0, with c != 0 since L is not +-I
    disc = (d - a) ** 2 + 4 * b * c
    if disc >= 0:
        raise NotElliptic("no fixed point in H")
    z = complex(a - d, math.sqrt(-disc)) / (2 * c)
    if z.imag < 0:
        z = z.conjugate()
    return ConformalStructureTau(z)


# ------------------------------------------------------------------ fields


@dataclass
class BarycentreField:
    """Per-cell conformal structures of a disintegration field.

    ``tau`` is NaN on sparse cells.  ``oscillation`` is the largest
    hyperbolic distance between the structures of neighbouring cells.
    """

    tau: np.ndarray
    shape: tuple  # (base, base, fibre, fibre) cell counts
    oscillation: float
    spread: float  # max distance from the field's median structure
    median: complex
    n_skipped: int

    def distance_to(self, ref: ConformalStructureTau) -> float:
        ok = ~np.isnan(self.tau)
        return float(np.max(halfplane_distance(self.tau[ok], ref.tau)))

    def csv_rows(self):
        rows = []
        for idx in np.ndindex(*self.shape):
            t = self.tau[np.ravel_multi_index(idx, self.shape)]
            rows.append((*idx, float(t.real), float(t.imag)))
        return rows

    def to_json(self):
        return {
            "shape": list(self.shape),
            "oscillation": self.oscillation,
            "spread": self.spread,
            "median_tau": [self.median.real, self.median.imag],
            "skipped_cells": self.n_skipped,
        }


def _neighbour_oscillation(tau, shape, periodic):
    grid = tau.reshape(shape)
    worst = 0.0
    for axis, wrap in enumerate(periodic):
        if shape[axis] < 2:
            continue
        a = grid
        b = np.roll(grid, -1, axis=axis)
        d = halfplane_distance(a, b)
        if not wrap:
            d = np.delete(d, -1, axis=axis)
        d = d[~np.isnan(d)]
        if d.size:
            worst = max(worst, float(d.max()))
    return worst


def barycentre_field(field, tol: float = 1e-10, heavy_slack: float = HEAVY_SLACK) -> BarycentreField:
    """Conformal structure of every populated cell of a disintegration field.

    Raises HeavyAtom (with the offending cell) as soon as a conditional has
    a cluster of mass at least 1/2 - heavy_slack.
    """
    n = field.n_cells
    centres = (np.arange(field.n_bins) + 0.5) * np.pi / field.n_bins
    tau = np.full(n, np.nan + 1j * np.nan)
    skipped = 0
    sparse = field.sparse
    for c in range(n):
        if sparse[c]:
            skipped += 1
            continue
        cond = field.conditional(c)
        if cond.atoms.masses and cond.atoms.masses[0] >= 0.5 - heavy_slack:
            raise HeavyAtom(f"cell {c}: atom of mass {cond.atoms.masses[0]:.3f}", cell=c)
        tau[c] = structure_from_measure(centres, cond.hist, tol, heavy_slack).tau
    shape = (field.base_cells, field.base_cells, field.fibre_cells, field.fibre_cells)
    periodic = (True, True, field.fibre_kind == "torus", True)
    ok = ~np.isnan(tau)
    if not ok.any():
        raise HeavyAtom("no populated cells")
    # coordinatewise median is a robust centre for the spread summary
    med = complex(np.median(tau[ok].real), np.median(tau[ok].imag))
    spread = float(np.max(halfplane_distance(tau[ok], med)))
    return BarycentreField(tau, shape, _neighbour_oscillation(tau, shape, periodic), spread, med, skipped)
