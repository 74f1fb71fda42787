"""Stable and unstable holonomies between fibres of a skew product.

The unstable holonomy from the fibre over x to the fibre over y (same
unstable leaf) is the limit of G^n_{g^-n y} o (G^n_{g^-n x})^-1, where G^n_z
is the fibre part of f^n started over z; the stable one exchanges past and
future.  Truncations are refined one step at a time until two consecutive
ones agree within ``tol`` (the Cauchy gap), and long leaf segments are cut
into short hops whose holonomies are composed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels as K
from .base import STABLE, UNSTABLE, SuPath, leaf_coordinate, leaf_point, path_from_lengths, periodic_points
from .base import connect_su, reduce_mod1, wrap_diff
from .errors import NoConvergence, NotOnLeaf
from .fibred import TORUS, FibredSystem

MAX_TRUNCATION = 200
MAX_HOP = 0.1
# a Cauchy gap that has not halved over this many refinements is stuck
STALL_WINDOW = 20
# gaps oscillate along orbits, so this many consecutive ones must pass
CONFIRM = 3


@dataclass
class FibreHolonomy:
    x: np.ndarray
    y: np.ndarray
    kind: str
    points: np.ndarray  # (m, d) fibre points over x
    images: np.ndarray  # (m, d) their images over y
    n_trunc: int
    tail_bound: float
    gaps: np.ndarray  # Cauchy gaps of the first hop, index n-1 for truncation n
    translation_fit: Optional[np.ndarray] = None
    fit_deviation: Optional[float] = None

    @property
    def samples(self):
        return list(zip(self.points, self.images))

    def to_json(self):
        return {
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "kind": self.kind,
            "n_trunc": self.n_trunc,
            "tail_bound": self.tail_bound,
            "translation_fit": None if self.translation_fit is None else self.translation_fit.tolist(),
            "fit_deviation": self.fit_deviation,
            "samples": [[p.tolist(), q.tolist()] for p, q in zip(self.points, self.images)],
        }


def _fibre_gap(f: FibredSystem, a, b):
    if f.fibre_kind == TORUS:
        return float(np.max(np.abs(wrap_diff(a[:2] - b[:2]))))
    return float(np.max(np.abs(a - b)))


def _pad(f: FibredSystem, v):
    out = np.zeros(3)
    out[: f.fibre_dim] = v
    return out


def _leaf_data(f: FibredSystem, kind: str):
    g = f.base
    e = g.leaf_vector(kind)
    if kind == UNSTABLE:
        return e, 1.0 / g.lambda_u, 1
    return e, g.lambda_s, -1


def fit_geometric_ratio(gaps, floor: float = 1e-13) -> float:
    """exp of the least-squares slope of log(gap) against n, over the gaps
    above ``floor`` (below it rounding noise dominates)."""
    gaps = np.asarray(gaps, dtype=float)
    n = np.arange(1, len(gaps) + 1)
    keep = gaps > floor
    if keep.sum() < 3:
        return float("nan")
    slope = np.polyfit(n[keep], np.log(gaps[keep]), 1)[0]
    return float(math.exp(slope))


def _stalled(gaps) -> bool:
    if len(gaps) <= 2 * STALL_WINDOW:
        return False
    recent = max(gaps[-STALL_WINDOW:])
    before = max(gaps[-2 * STALL_WINDOW : -STALL_WINDOW])
    return recent > 0.5 * before


def _hop(f: FibredSystem, x, v3, kind, t, tol, max_n, want_jac):
    """Holonomy of one short hop, refined until the Cauchy gap is below tol.

    Returns (image, matrix, n, gaps).
    """
    e, rate, direction = _leaf_data(f, kind)
    x = np.asarray(x, dtype=float)
    prev, prev_m, _ = K.holonomy_truncated(f.params, x, v3, e, t, rate, 0, direction, want_jac)
    gaps: List[float] = []
    for n in range(1, max_n + 1):
        out, M, ok = K.holonomy_truncated(f.params, x, v3, e, t, rate, n, direction, want_jac)
        if not ok:
            raise NoConvergence("fibre inverse failed while truncating the holonomy")
        gap = _fibre_gap(f, out, prev)
        if want_jac:
            gap = max(gap, float(np.max(np.abs(M - prev_m))))
        gaps.append(gap)
        if n >= CONFIRM and max(gaps[-CONFIRM:]) < tol:
            return out, M, n, gaps
        if _stalled(gaps):
            break
        prev, prev_m = out, M
    raise NoConvergence(f"Cauchy gap {gaps[-1]:.3g} still above {tol:g} after n = {len(gaps)}")


def _hop_lengths(t: float, max_hop: float):
    m = max(1, int(math.ceil(abs(t) / max_hop - 1e-12)))
    return [t / m] * m


def _transport(f, x, v3, kind, t, tol, max_n, max_hop, want_jac):
    """Compose hop holonomies along the leaf segment of signed length t."""
    M = np.eye(2)
    n_max = 0
    first_gaps = None
    tail = 0.0
    p = np.asarray(x, dtype=float)
    for dt in _hop_lengths(t, max_hop):
        if dt == 0.0:
            break
        v3, Mh, n, gaps = _hop(f, p, v3, kind, dt, tol, max_n, want_jac)
        M = Mh @ M
        n_max = max(n_max, n)
        if first_gaps is None:
            first_gaps = gaps
        r = min(fit_geometric_ratio(gaps), 0.99) if len(gaps) >= 3 else 0.99
        tail += gaps[-1] * (r / (1.0 - r) if np.isfinite(r) else 1.0)
        p = leaf_point(f.base, p, kind, dt)
    return v3, M, n_max, np.asarray(first_gaps or [], dtype=float), tail


def _resolve_leaf(f: FibredSystem, x, y, kind: str, t: Optional[float]):
    if t is None:
        t = leaf_coordinate(f.base, x, y, kind)
        if t is None:
            raise NotOnLeaf(f"{y} is not on the {kind} leaf of {x} (within 1e-9)")
    return float(t)


def _default_points(f: FibredSystem, n: int, seed: int):
    rng = np.random.default_rng(seed)
    return f.random_states(rng, n)[:, 2 : 2 + f.fibre_dim]


def translation_fit(v, h):
    """Best-fit torus translation tau with h(v) ~ v + tau, and the max
    deviation from it."""
    d = wrap_diff(np.asarray(h) - np.asarray(v))
    ref = d[0]
    tau = ref + np.mean(wrap_diff(d - ref), axis=0)
    dev = float(np.max(np.abs(wrap_diff(d - tau)))) if len(d) else 0.0
    return reduce_mod1(tau), dev


def fibre_holonomy(
    f: FibredSystem,
    x,
    y,
    kind: str = UNSTABLE,
    tol: float = 1e-10,
    points=None,
    n_points: int = 20,
    seed: int = 0,
    leaf_length: Optional[float] = None,
    max_n: int = MAX_TRUNCATION,
    max_hop: float = MAX_HOP,
) -> FibreHolonomy:
    """Sample the ``kind`` holonomy from the fibre over x to the fibre over y.

    ``leaf_length`` gives the signed leaf distance from x to y directly;
    otherwise it is recovered from the points (NotOnLeaf if y is off the
    leaf).  For group extensions a translation is fitted to the samples.
    """
    x = reduce_mod1(x)
    t = _resolve_leaf(f, x, y, kind, leaf_length)
    y = leaf_point(f.base, x, kind, t)
    pts = _default_points(f, n_points, seed) if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    images = np.empty_like(pts)
    n_trunc, tail, gaps = 0, 0.0, np.zeros(0)
    for i, v in enumerate(pts):
        out, _, n, g, tb = _transport(f, x, _pad(f, v), kind, t, tol, max_n, max_hop, False)
        images[i] = out[: f.fibre_dim]
        n_trunc = max(n_trunc, n)
        tail = max(tail, tb)
        if i == 0:
            gaps = g
    if f.fibre_kind == TORUS:
        images = reduce_mod1(images)
    fit = dev = None
    if f.is_group_extension:
        fit, dev = translation_fit(pts, images)
    return FibreHolonomy(x, y, kind, pts, images, n_trunc, tail, gaps, fit, dev)


@dataclass
class DerivativeHolonomy:
    x: np.ndarray
    v: np.ndarray
    y: np.ndarray
    w: np.ndarray  # image of v, the fibre coordinate of q
    kind: str
    matrix: np.ndarray
    n_trunc: int
    cauchy_gap: float
    gaps: np.ndarray

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    def to_json(self):
        return {
            "p": [self.x.tolist(), self.v.tolist()],
            "q": [self.y.tolist(), self.w.tolist()],
            "kind": self.kind,
            "matrix": self.matrix.tolist(),
            "n_trunc": self.n_trunc,
            "cauchy_gap": self.cauchy_gap,
        }


def derivative_holonomy(
    f: FibredSystem,
    x,
    v,
    y,
    kind: str = UNSTABLE,
    tol: float = 1e-10,
    leaf_length: Optional[float] = None,
    max_n: int = MAX_TRUNCATION,
    max_hop: float = MAX_HOP,
) -> DerivativeHolonomy:
    """Derivative at p = (x, v) of the ``kind`` holonomy to the fibre over y.

    The limit of D(G^n over y) (D G^n over x)^-1 (unstable; the stable one
    is ordered the other way), in the centre frames.  The fibre point of q
    is the holonomy image of v, computed alongside.  Both the point and the
    matrix must pass the Cauchy test.
    """
    x = reduce_mod1(x)
    t = _resolve_leaf(f, x, y, kind, leaf_length)
    y = leaf_point(f.base, x, kind, t)
    v = np.asarray(v, dtype=float)
    out, M, n, gaps, _ = _transport(f, x, _pad(f, v), kind, t, tol, max_n, max_hop, True)
    w = out[: f.fibre_dim]
    if f.fibre_kind == TORUS:
        w = reduce_mod1(w)
    gap = float(gaps[-1]) if len(gaps) else 0.0
    return DerivativeHolonomy(x, v, y, w, kind, M, n, gap, gaps)


# ------------------------------------------------------------------ loops


def is_closed(f: FibredSystem, loop: SuPath, tol: float = 1e-9) -> bool:
    start = loop.start()
    end = loop.endpoint(f.base)
    return bool(np.max(np.abs(wrap_diff(end - start))) < tol) and loop.is_consistent(f.base, tol)


def loop_holonomy(f: FibredSystem, loop: SuPath, v=None, tol: float = 1e-10, max_hop: float = MAX_HOP):
    """Compose leg holonomies around a closed su-loop.

    For group extensions, with ``v`` omitted, returns the group element
    h(0) in [0,1)^2; otherwise the image of the fibre point ``v``.
    """
    if not is_closed(f, loop):
        raise NotOnLeaf("su-loop does not close within 1e-9")
    if v is None:
        if not f.is_group_extension:
            raise ValueError("a fibre point is required outside group extensions")
        v = np.zeros(f.fibre_dim)
    v3 = _pad(f, np.asarray(v, dtype=float))
    for leg in loop.legs:
        v3, _, _, _, _ = _transport(f, leg.start, v3, leg.leaf_kind, leg.signed_length, tol, MAX_TRUNCATION,
                                    max_hop, False)
    out = v3[: f.fibre_dim]
    return reduce_mod1(out) if f.fibre_kind == TORUS else out


def quadrilateral(f: FibredSystem, x, a: float, b: float) -> SuPath:
    """Null-homotopic loop: a along the unstable leaf, b along the stable
    one, then back along both.  Leaves of a linear map are straight lines,
    so the loop closes exactly."""
    return path_from_lengths(f.base, x, [(UNSTABLE, a), (STABLE, b), (UNSTABLE, -a), (STABLE, -b)])


# ----------------------------------------------------------- group sample


@dataclass
class HolonomyGroupSample:
    x: np.ndarray
    elements: np.ndarray  # (m, 2) in [0,1)^2
    covering_radius: float
    radius_history: List[float]  # after the loop stage and each closure round
    n_loops: int
    grid: int

    def to_json(self):
        return {
            "x": self.x.tolist(),
            "n_elements": int(len(self.elements)),
            "covering_radius": self.covering_radius,
            "radius_history": list(self.radius_history),
            "n_loops": self.n_loops,
            "grid": self.grid,
        }


def covering_radius(elements, grid: int = 64) -> float:
    """Max over the grid (i/grid, j/grid) of the torus distance to the
    nearest element."""
    pts = reduce_mod1(np.atleast_2d(elements))
    tree = cKDTree(pts, boxsize=1.0)
    g = np.arange(grid) / grid
    q = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    d, _ = tree.query(q)
    return float(d.max())


def _thin(pts, cells: int):
    """Keep the first point in each cell of a cells x cells partition.

    Earlier points win, so a thinned superset never loses a cell that was
    already occupied and the covering radius cannot grow."""
    pts = reduce_mod1(pts)
    idx = np.minimum((pts * cells).astype(np.int64), cells - 1)
    key = idx[:, 0] * cells + idx[:, 1]
    _, first = np.unique(key, return_index=True)
    return pts[np.sort(first)]


def _nearby_periodic(f: FibredSystem, max_period: int):
    pts = []
    for p in range(1, max_period + 1):
        pts.extend(periodic_points(f.base, p))
    return np.array(pts)


def holonomy_group_sample(
    f: FibredSystem,
    x,
    n_loops: int = 64,
    rng_seed: int = 0,
    closure_rounds: int = 16,
    pair_budget: int = 65536,
    cells: int = 128,
    max_period: int = 4,
    grid: int = 64,
    tol: float = 1e-10,
) -> HolonomyGroupSample:
    """Sample the holonomy group at x from loops through periodic points.

    Each loop runs four legs: along the unstable leaf of x and the stable
    leaf of a point near a randomly chosen periodic point (period <=
    max_period), then back.  The loop elements h(0) and their inverses are
    closed under sums of random pairs (at most ``pair_budget`` per round),
    keeping one element per cell of a cells x cells partition.  Rounds stop
    when the covering radius stalls.  The radius is a density heuristic,
    not a proof that the group is all of T^2.
    """
    if not f.is_group_extension:
        raise ValueError("holonomy groups are sampled for torus group extensions only")
    x = reduce_mod1(x)
    per = _nearby_periodic(f, max_period)
    children = np.random.SeedSequence(rng_seed).spawn(n_loops + closure_rounds)
    elems = [np.zeros(2)]
    for i in range(n_loops):
        rng = np.random.default_rng(children[i])
        z = per[rng.integers(len(per))]
        # a random corner near z keeps the loops from repeating exactly
        z = reduce_mod1(z + rng.uniform(-0.05, 0.05, size=2))
        path = connect_su(f.base, x, z)
        a = path.legs[0].signed_length
        b = path.legs[1].signed_length
        h = loop_holonomy(f, quadrilateral(f, x, a, b), tol=tol)
        elems.append(h)
        elems.append(reduce_mod1(-h))
    S = _thin(np.array(elems), cells)
    history = [covering_radius(S, grid)]
    for r in range(closure_rounds):
        rng = np.random.default_rng(children[n_loops + r])
        m = len(S)
        if m * m <= pair_budget:
            i, j = np.divmod(np.arange(m * m), m)
        else:
            i = rng.integers(m, size=pair_budget)
            j = rng.integers(m, size=pair_budget)
        S = _thin(np.concatenate([S, S[i] + S[j]]), cells)
        history.append(covering_radius(S, grid))
        if len(history) > 2 and history[-1] == history[-3]:
            break
    return HolonomyGroupSample(x, S, history[-1], history, n_loops, grid)
