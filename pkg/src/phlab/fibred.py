"""Skew products over a toral automorphism with torus or sphere fibres.

A system maps ``(x, v) -> (A x mod 1, Gamma_x(v))``.

Torus fibre maps have the unified form

    Gamma_x(v) = L . S(v) + w(x) + eps * P(v)   (mod 1)

where ``S`` is an ordered composition of shears ``v[axis] += scale *
alpha(v[other])``.  The named fibre kinds fill in this template:

* ``affine``: ``L`` elliptic, no shears, no ``P``.
* ``shear``: ``L = I`` and one horizontal shear by ``alpha``.
* ``perturbed_affine``: elliptic ``L``, shears scaled by ``eps`` and an
  optional additive perturbation ``P`` (also scaled by ``eps``).

Sphere fibre maps are Moebius transformations in the stereographic chart,
either given by four complex coefficient maps or by a rotation vector
field ``r(x)`` (rotation by ``|r|`` about ``r``).  The ``perturbed_moebius``
kind composes them with an area-preserving twist about the polar axis,
either after the Moebius map (``mode="post"``) or as a conjugation
(``mode="conjugate"``).

Centre Jacobians on the sphere are expressed in the orthonormal frame of
the round metric induced by the chart in use (south chart when the third
coordinate is positive).  This frame is measurable, not continuous.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .base import ToralAutomorphism, make_hyperbolic_automorphism, reduce_mod1
from .errors import ConfigInvalid, DegenerateFibreMap, NewtonDivergence, NotElliptic
from .fourier import CircleFourier, TorusFourierMap

TORUS = "torus"
SPHERE = "sphere"

TORUS_KINDS = ("affine", "shear", "perturbed_affine")
SPHERE_KINDS = ("moebius", "perturbed_moebius")

DEGENERATE_DET = 0.1


# ----------------------------------------------------------------- matrices


def elliptic_order(L) -> int:
    """Order of an elliptic element of SL(2, Z), read off from the trace."""
    m = np.asarray(L)
    if m.shape != (2, 2) or np.any(np.mod(m, 1) != 0):
        raise NotElliptic("expected a 2x2 integer matrix")
    m = m.astype(np.int64)
    det = int(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])
    if det != 1:
        raise NotElliptic(f"det = {det}, expected 1")
    tr = int(m[0, 0] + m[1, 1])
    eye = np.eye(2, dtype=np.int64)
    if tr == 2:
        if np.array_equal(m, eye):
            return 1
        raise NotElliptic("parabolic matrix")
    if tr == -2:
        if np.array_equal(m, -eye):
            return 2
        raise NotElliptic("parabolic matrix")
    # trace = 2 cos(theta)
    order = {-1: 3, 0: 4, 1: 6}.get(tr)
    if order is None:
        raise NotElliptic(f"|trace| = {abs(tr)} > 2")
    return order


def matrix_power_int(m, n: int) -> np.ndarray:
    out = np.eye(2, dtype=np.int64)
    for _ in range(n):
        out = out @ np.asarray(m, dtype=np.int64)
    return out


# ------------------------------------------------------------------- sphere


def stereographic(p):
    """Chart value z = (p1 + i p2) / (1 - p3); the north pole maps to inf."""
    p = np.asarray(p, dtype=float)
    den = 1.0 - p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (p[..., 0] + 1j * p[..., 1]) / den
    return np.where(den == 0.0, complex(np.inf, 0.0), z)


def stereographic_inverse(z):
    """Unit vector for a chart value; inf maps to the north pole."""
    z = np.asarray(z, dtype=complex)
    inf = ~np.isfinite(z)
    zz = np.where(inf, 0.0, z)
    s = np.abs(zz) ** 2
    p = np.stack([2 * zz.real, 2 * zz.imag, s - 1.0], axis=-1) / (1.0 + s)[..., None]
    p = np.where(inf[..., None], np.array([0.0, 0.0, 1.0]), p)
    return p


def jacobian_P_inverse(z):
    """Area factor of the inverse chart: 4 / (1 + |z|^2)^2 (0 at inf)."""
    z = np.asarray(z, dtype=complex)
    with np.errstate(invalid="ignore", over="ignore"):
        val = 4.0 / (1.0 + np.abs(z) ** 2) ** 2
    return np.where(np.isfinite(z), val, 0.0)


def sphere_frame(p) -> np.ndarray:
    """Orthonormal tangent frame (3, 2) used for sphere centre Jacobians."""
    E = np.empty((3, 2))
    K.sphere_frame(float(p[0]), float(p[1]), float(p[2]), E)
    return E


# ------------------------------------------------------------------- system


def _header(base, kind):
    P = np.zeros(K.DATA)
    P[0] = kind
    P[1:5] = base.float_matrix.ravel()
    P[5:9] = base.float_inverse.ravel()
    return P


def _map_terms(m: TorusFourierMap):
    """Rows (k1, k2, cos..., sin...) of a torus Fourier map."""
    return np.hstack([m.ks, m.cos, m.sin]).ravel()


def pack_torus(base, L, w, shears, eps, P_add) -> np.ndarray:
    """Flat parameter vector for a torus fibre (layout in ``_kernels``)."""
    H = _header(base, K.TORUS)
    Lf = np.asarray(L, dtype=float)
    H[9:13] = Lf.ravel()
    H[13:17] = np.array([Lf[1, 1], -Lf[0, 1], -Lf[1, 0], Lf[0, 0]]) / (Lf[0, 0] * Lf[1, 1] - Lf[0, 1] * Lf[1, 0])
    H[17:19] = w.const
    H[19] = len(w.ks)
    ms = max([len(sh[2].ks) for sh in shears] + [0])
    H[20] = len(shears)
    H[21] = ms
    H[22] = eps
    H[23:25] = P_add.const
    H[25] = len(P_add.ks)
    H[26] = float(eps != 0.0 and not P_add.is_zero())
    blocks = []
    for axis, scale, series in shears:
        terms = np.zeros((ms, 3))
        k = len(series.ks)
        terms[:k, 0] = series.ks
        terms[:k, 1] = series.cos
        terms[:k, 2] = series.sin
        blocks.append(np.concatenate([[float(axis), float(scale)], terms.ravel()]))
    parts = [H, _map_terms(w)] + blocks + [_map_terms(P_add)]
    return np.concatenate(parts)


def pack_sphere(base, coeff_mode, coeffs: TorusFourierMap, twist_mode, eps, twist: CircleFourier,
                frame_twist=0.0) -> np.ndarray:
    """Flat parameter vector for a sphere fibre (layout in ``_kernels``)."""
    H = _header(base, K.SPHERE)
    H[9] = coeff_mode
    H[10] = twist_mode
    H[11] = frame_twist
    H[12] = eps
    H[13] = coeffs.dim
    H[14] = len(coeffs.ks)
    H[15] = len(twist.ks)
    H[16 : 16 + coeffs.dim] = coeffs.const
    tw = np.stack([twist.ks, twist.cos, twist.sin], axis=1).ravel() if len(twist.ks) else np.zeros(0)
    return np.concatenate([H, _map_terms(coeffs), tw])


@dataclass(frozen=True)
class FibredSystem:
    """Validated skew product.  Build with :func:`system_from_json`."""

    base: ToralAutomorphism
    fibre_kind: str  # TORUS or SPHERE
    spec_kind: str
    spec: dict = field(repr=False)
    params: np.ndarray = field(repr=False)
    L: Optional[np.ndarray] = None
    w: Optional[TorusFourierMap] = field(default=None, repr=False)
    volume_preserving: bool = True
    name: str = ""

    @property
    def fibre_dim(self) -> int:
        return 2 if self.fibre_kind == TORUS else 3

    @property
    def is_group_extension(self) -> bool:
        """Fibre maps are translations composed with a fixed L."""
        return self.spec_kind == "affine"

    @property
    def frame_twist(self) -> float:
        return float(self.params[11]) if self.fibre_kind == SPHERE else 0.0

    def to_json(self):
        return self.spec

    def with_frame_twist(self, amount: float) -> "FibredSystem":
        """Same system with sphere frames rotated by a point-dependent angle."""
        if self.fibre_kind != SPHERE:
            raise ConfigInvalid("frame twist applies to sphere fibres only")
        P = self.params.copy()
        P[11] = float(amount)
        return FibredSystem(self.base, self.fibre_kind, self.spec_kind, self.spec, P,
                            self.L, self.w, self.volume_preserving, self.name)

    # state helpers --------------------------------------------------------
    def states(self, x, v) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        n = max(len(x), len(v))
        s = np.zeros((n, 5))
        s[:, :2] = reduce_mod1(x)
        if self.fibre_kind == TORUS:
            s[:, 2:4] = reduce_mod1(v[:, :2])
        else:
            s[:, 2:5] = v[:, :3] / np.linalg.norm(v[:, :3], axis=1, keepdims=True)
        return s

    def split(self, s, squeeze):
        x = s[:, :2]
        v = s[:, 2 : 2 + self.fibre_dim]
        if squeeze:
            return x[0], v[0]
        return x, v

    def random_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x = rng.random((n, 2))
        if self.fibre_kind == TORUS:
            v = rng.random((n, 2))
        else:
            v = rng.normal(size=(n, 3))
        return self.states(x, v)


# ------------------------------------------------------------------ parsing

_SCHEMA_VERSION = 1


def _elliptic(L, what):
    L = np.asarray(L)
    elliptic_order(L)
    return L.astype(np.int64)


def _volume_check(P, n=256, seed=12345):
    rng = np.random.default_rng(seed)
    fs = np.zeros((n, 5))
    fs[:, :2] = rng.random((n, 2))
    if P[0] == K.TORUS:
        fs[:, 2:4] = rng.random((n, 2))
    else:
        p = rng.normal(size=(n, 3))
        fs[:, 2:5] = p / np.linalg.norm(p, axis=1, keepdims=True)
    _, jac = K.batch_step(P, fs, 1)
    det = np.linalg.det(jac)
    return bool(np.all(np.abs(det - 1.0) < 1e-9)), det


def _degenerate_guard(P, n=64):
    # torus Jacobians depend on the fibre coordinate only, so a fibre grid
    # at one base point covers every base point
    g = (np.arange(n) + 0.5) / n
    v0, v1 = np.meshgrid(g, g, indexing="ij")
    fs = np.zeros((n * n, 5))
    fs[:, 2] = v0.ravel()
    fs[:, 3] = v1.ravel()
    _, jac = K.batch_step(P, fs, 1)
    det = np.abs(np.linalg.det(jac))
    if det.min() < DEGENERATE_DET:
        raise DegenerateFibreMap(f"min |det D^c f| = {det.min():.3g} < {DEGENERATE_DET}")


def _parse_circle(data, what):
    try:
        return CircleFourier.from_json(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad series for {what}: {exc}") from exc


def _parse_map(data, dim, what):
    try:
        return TorusFourierMap.from_json(data, dim)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad Fourier map for {what}: {exc}") from exc


def system_from_json(spec: dict) -> FibredSystem:
    """Build and validate a system from its JSON description."""
    if not isinstance(spec, dict):
        raise ConfigInvalid("system spec must be an object")
    if spec.get("schema_version") != _SCHEMA_VERSION:
        raise ConfigInvalid(f"schema_version must be {_SCHEMA_VERSION}")
    base = make_hyperbolic_automorphism(spec["base"])
    fib = spec.get("fibre")
    if not isinstance(fib, dict) or "kind" not in fib:
        raise ConfigInvalid("missing fibre.kind")
    kind = fib["kind"]
    name = spec.get("name", "")
    if kind in TORUS_KINDS:
        w = _parse_map(fib.get("w", {}), 2, "w")
        shears = []
        eps = 0.0
        P = TorusFourierMap.zero(2)
        if kind == "shear":
            L = np.eye(2, dtype=np.int64)
            shears = [(0, 1.0, _parse_circle(fib["alpha"], "alpha"))]
        else:
            L = _elliptic(fib["L"], "L")
        if kind == "perturbed_affine":
            eps = float(fib["eps"])
            for sh in fib.get("shears", []):
                axis = int(sh["axis"])
                if axis not in (0, 1):
                    raise ConfigInvalid("shear axis must be 0 or 1")
                shears.append((axis, eps * float(sh.get("scale", 1.0)), _parse_circle(sh["alpha"], "shear")))
            if "additive" in fib:
                P = _parse_map(fib["additive"], 2, "additive")
        params = pack_torus(base, L, w, shears, eps, P)
        if kind == "perturbed_affine":
            _degenerate_guard(params)
        vp, _ = _volume_check(params)
        return FibredSystem(base, TORUS, kind, spec, params, L, w, vp, name)
    if kind in SPHERE_KINDS:
        if ("rotation" in fib) == ("coefficients" in fib):
            raise ConfigInvalid("moebius fibre needs exactly one of rotation/coefficients")
        if "rotation" in fib:
            mode = 1
            coeffs = _parse_map(fib["rotation"], 3, "rotation")
        else:
            mode = 0
            coeffs = _parse_map(fib["coefficients"], 8, "coefficients")
        twist_mode = 0
        eps = 0.0
        twist = CircleFourier.zero()
        if kind == "perturbed_moebius":
            eps = float(fib["eps"])
            twist = _parse_circle(fib["twist"], "twist")
            twist_mode = {"post": 1, "conjugate": 2}.get(fib.get("mode", "post"))
            if twist_mode is None:
                raise ConfigInvalid("mode must be 'post' or 'conjugate'")
        params = pack_sphere(base, mode, coeffs, twist_mode, eps, twist)
        if mode == 0:
            g = (np.arange(16) + 0.5) / 16
            xs = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
            c = coeffs(xs)
            a, b, cc, d = (c[:, 0] + 1j * c[:, 1], c[:, 2] + 1j * c[:, 3],
                           c[:, 4] + 1j * c[:, 5], c[:, 6] + 1j * c[:, 7])
            if np.min(np.abs(a * d - b * cc)) < 1e-6:
                raise DegenerateFibreMap("ad - bc vanishes on the sample grid")
        vp, _ = _volume_check(params)
        return FibredSystem(base, SPHERE, kind, spec, params, None, None, vp, name)
    raise ConfigInvalid(f"unknown fibre kind {kind!r}")


# --------------------------------------------------------------- operations


def evaluate(f: FibredSystem, x, v, n: int = 1):
    """Apply the skew product n >= 0 times to (x, v) (single or batched)."""
    squeeze = np.asarray(x).ndim == 1
    s = f.states(x, v)
    out, _ = K.batch_step(f.params, s, int(n))
    return f.split(out, squeeze)


def centre_jacobian(f: FibredSystem, x, v, n: int = 1):
    """Derivative of the fibre map of f^n at (x, v), composed along the orbit."""
    squeeze = np.asarray(x).ndim == 1
    s = f.states(x, v)
    M = K.batch_jacobian_n(f.params, s, int(n))
    return M[0] if squeeze else M


def invert(f: FibredSystem, x, v, n: int = 1):
    """Preimage under f^n."""
    squeeze = np.asarray(x).ndim == 1
    s = f.states(x, v)
    out, ok = K.batch_back(f.params, s, int(n))
    if not np.all(ok):
        raise NewtonDivergence(f"fibre inverse failed at {int((~ok).sum())} points")
    return f.split(out, squeeze)


def fibre_map(f: FibredSystem, x, v):
    """Gamma_x(v) with the base point held fixed (single point)."""
    s = f.states(x, v)[0]
    out = np.empty(3)
    J = np.empty((2, 2))
    K.fibre_apply(f.params, s[0], s[1], s[2:5].copy(), out, J)
    return out[: f.fibre_dim], J


def fibre_area_jacobian(f: FibredSystem, x, v):
    """Area distortion of the fibre map (round area on the sphere)."""
    return np.linalg.det(centre_jacobian(f, x, v))
