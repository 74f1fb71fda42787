"""Linear Anosov automorphisms of the 2-torus.

Points of T^2 are plain float arrays of shape ``(2,)`` (or ``(n, 2)`` for
batches) with coordinates reduced into ``[0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import NotHyperbolic, NotUnimodular, PeriodTooLarge

STABLE = "stable"
UNSTABLE = "unstable"

DEFAULT_PERIODIC_CAP = 100_000


def reduce_mod1(x):
    """Reduce coordinates into [0, 1)."""
    y = np.mod(np.asarray(x, dtype=float), 1.0)
    # np.mod can return exactly 1.0 for tiny negative inputs
    return np.where(y >= 1.0, 0.0, y)


def torus_point(x1, x2=None):
    if x2 is None:
        return reduce_mod1(np.asarray(x1, dtype=float))
    return reduce_mod1(np.array([x1, x2], dtype=float))


def wrap_diff(d):
    """Representative of a torus displacement in [-1/2, 1/2)."""
    d = np.asarray(d, dtype=float)
    return d - np.floor(d + 0.5)


def torus_dist(x, y):
    return np.linalg.norm(wrap_diff(np.asarray(x) - np.asarray(y)), axis=-1)


@dataclass(frozen=True)
class ToralAutomorphism:
    matrix: np.ndarray
    lambda_u: float
    lambda_s: float
    e_u: np.ndarray
    e_s: np.ndarray
    inverse: np.ndarray = field(repr=False)

    @property
    def det(self) -> int:
        m = self.matrix
        return int(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])

    @property
    def float_matrix(self) -> np.ndarray:
        return self.matrix.astype(float)

    @property
    def float_inverse(self) -> np.ndarray:
        return self.inverse.astype(float)

    def leaf_vector(self, kind: str) -> np.ndarray:
        if kind == UNSTABLE:
            return self.e_u
        if kind == STABLE:
            return self.e_s
        raise ValueError(f"unknown leaf kind {kind!r}")

    def leaf_rate(self, kind: str) -> float:
        """Multiplier of leaf length under one forward step."""
        return self.lambda_u if kind == UNSTABLE else self.lambda_s

    def to_json(self):
        return self.matrix.tolist()


def _eigvec(m, lam):
    a, b = m[0]
    c, d = m[1]
    v1 = np.array([b, lam - a])
    v2 = np.array([lam - d, c])
    v = v1 if np.linalg.norm(v1) >= np.linalg.norm(v2) else v2
    v = v / np.linalg.norm(v)
    # fix the sign so the first nonzero coordinate is positive
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        v = -v
    return v


def make_hyperbolic_automorphism(matrix) -> ToralAutomorphism:
    """Validate an integer 2x2 matrix as a hyperbolic toral automorphism.

    Eigendata comes from the closed form in trace and determinant.
    """
    m = np.asarray(matrix)
    if m.shape != (2, 2):
        raise NotUnimodular(f"expected a 2x2 matrix, got shape {m.shape}")
    if not np.all(np.equal(np.mod(m, 1), 0)):
        raise NotUnimodular("matrix entries must be integers")
    m = m.astype(np.int64)
    det = int(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])
    if abs(det) != 1:
        raise NotUnimodular(f"|det| = {abs(det)} != 1")
    tr = int(m[0, 0] + m[1, 1])
    disc = tr * tr - 4 * det
    if disc <= 0:
        raise NotHyperbolic(f"complex or repeated spectrum (trace {tr}, det {det})")
    root = np.sqrt(float(disc))
    l1 = (tr + root) / 2.0
    l2 = (tr - root) / 2.0
    if tr >= 0:
        # recompute the small root stably from the product
        l2 = det / l1
    else:
        l1 = det / l2
    lam_u, lam_s = (l1, l2) if abs(l1) > abs(l2) else (l2, l1)
    if abs(abs(lam_u) - 1.0) < 1e-12 or abs(abs(lam_s) - 1.0) < 1e-12:
        raise NotHyperbolic("eigenvalue on the unit circle")
    fm = m.astype(float)
    e_u = _eigvec(fm, lam_u)
    e_s = _eigvec(fm, lam_s)
    inv = det * np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]], dtype=np.int64)
    return ToralAutomorphism(m, float(lam_u), float(lam_s), e_u, e_s, inv)


CAT_MAP = [[2, 1], [1, 1]]


def iterate(g: ToralAutomorphism, x, n: int):
    """Return A^n x mod 1, reducing after every application."""
    x = reduce_mod1(x)
    mat = g.float_matrix if n >= 0 else g.float_inverse
    for _ in range(abs(int(n))):
        x = reduce_mod1(x @ mat.T)
    return x


def leaf_point(g: ToralAutomorphism, x, kind: str, t):
    """Point at signed leaf distance ``t`` from ``x`` along the given leaf."""
    e = g.leaf_vector(kind)
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return reduce_mod1(x + t[..., None] * e if t.ndim else x + float(t) * e)


def leaf_coordinate(g: ToralAutomorphism, x, y, kind: str, window: int = 3, atol: float = 1e-9):
    """Signed leaf distance from x to y along the ``kind`` leaf, or None.

    Only lifts within ``window`` lattice steps are examined, so the answer is
    the shortest leaf segment joining the two points in that window.
    """
    e = g.leaf_vector(kind)
    d0 = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    best = None
    rng = range(-window, window + 1)
    for i in rng:
        for j in rng:
            d = d0 + np.array([i, j])
            t = float(d @ e)
            if np.linalg.norm(d - t * e) < atol:
                if best is None or abs(t) < abs(best):
                    best = t
    return best


@dataclass(frozen=True)
class SuLeg:
    leaf_kind: str
    start: np.ndarray
    signed_length: float

    def end(self, g: ToralAutomorphism) -> np.ndarray:
        return leaf_point(g, self.start, self.leaf_kind, self.signed_length)


@dataclass(frozen=True)
class SuPath:
    legs: Tuple[SuLeg, ...]

    def endpoint(self, g: ToralAutomorphism) -> np.ndarray:
        return self.legs[-1].end(g)

    def start(self) -> np.ndarray:
        return self.legs[0].start

    def reversed(self, g: ToralAutomorphism) -> "SuPath":
        legs = [SuLeg(leg.leaf_kind, leg.end(g), -leg.signed_length) for leg in reversed(self.legs)]
        return SuPath(tuple(legs))

    def is_consistent(self, g: ToralAutomorphism, tol: float = 1e-9) -> bool:
        for a, b in zip(self.legs, self.legs[1:]):
            if torus_dist(a.end(g), b.start) > tol:
                return False
        return True

    def to_json(self):
        return [
            {"leaf": leg.leaf_kind, "start": leg.start.tolist(), "length": leg.signed_length}
            for leg in self.legs
        ]


def path_from_lengths(g: ToralAutomorphism, x, legs) -> SuPath:
    """Build a consecutive su-path from ``[(kind, length), ...]`` starting at x."""
    out = []
    p = reduce_mod1(x)
    for kind, t in legs:
        leg = SuLeg(kind, p, float(t))
        out.append(leg)
        p = leg.end(g)
    return SuPath(tuple(out))


def connect_su(g: ToralAutomorphism, x, y, window: int = 3) -> SuPath:
    """Two-leg path (unstable then stable) from x to y.

    Solves x + a e_u + b e_s = y + m over lattice lifts m in a +-window box and
    keeps the lift of minimal |a| + |b|.
    """
    x = reduce_mod1(x)
    y = reduce_mod1(y)
    basis = np.column_stack([g.e_u, g.e_s])
    binv = np.linalg.inv(basis)
    d0 = y - x
    best = None
    for i in range(-window, window + 1):
        for j in range(-window, window + 1):
            ab = binv @ (d0 + np.array([i, j]))
            cost = abs(ab[0]) + abs(ab[1])
            if best is None or cost < best[0] - 1e-15:
                best = (cost, ab)
    a, b = best[1]
    path = path_from_lengths(g, x, [(UNSTABLE, a), (STABLE, b)])
    end = path.endpoint(g)
    if torus_dist(end, y) > 1e-9:  # pragma: no cover - basis always spans
        raise RuntimeError("su-path endpoint check failed")
    return path


def periodic_points(g: ToralAutomorphism, period: int, cap: int = DEFAULT_PERIODIC_CAP) -> List[np.ndarray]:
    """All points with g^period x = x, enumerated exactly.

    The solutions form the finite group B^{-1} Z^2 / Z^2 with B = A^period - I;
    it is generated by the columns of B^{-1}, which have denominator |det B|,
    so the enumeration runs in integer arithmetic.
    """
    if period < 1:
        raise ValueError("period must be >= 1")
    m = np.eye(2, dtype=object)
    a = g.matrix.astype(object)
    for _ in range(period):
        m = m.dot(a)
    b = m - np.eye(2, dtype=object)
    det = int(b[0, 0] * b[1, 1] - b[0, 1] * b[1, 0])
    count = abs(det)
    if count > cap:
        raise PeriodTooLarge(f"{count} periodic points exceed cap {cap}")
    adj = [[int(b[1, 1]), -int(b[0, 1])], [-int(b[1, 0]), int(b[0, 0])]]
    sgn = 1 if det > 0 else -1
    gens = [
        ((sgn * adj[0][0]) % count, (sgn * adj[1][0]) % count),
        ((sgn * adj[0][1]) % count, (sgn * adj[1][1]) % count),
    ]
    seen = {(0, 0)}
    frontier = [(0, 0)]
    while frontier:
        nxt = []
        for p in frontier:
            for gi in gens:
                q = ((p[0] + gi[0]) % count, (p[1] + gi[1]) % count)
                if q not in seen:
                    seen.add(q)
                    nxt.append(q)
        frontier = nxt
    pts = sorted(seen)
    return [np.array([p[0] / count, p[1] / count]) for p in pts]
