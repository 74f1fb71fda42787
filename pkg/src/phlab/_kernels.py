"""Compiled inner loops for the skew products.

A system is packed into one flat float64 vector ``P`` (built by
``fibred.pack_torus`` / ``fibred.pack_sphere``); passing a single array
keeps the per-call overhead of the compiled helpers negligible.

Common header: ``P[0]`` fibre kind (0 torus, 1 sphere), ``P[1:5]`` the base
matrix A row-major, ``P[5:9]`` its inverse.

Torus: ``P[9:13]`` L, ``P[13:17]`` L^-1, ``P[17:19]`` constant of w,
``P[19]`` number of w terms, ``P[20]`` number of shears, ``P[21]`` terms per
shear, ``P[22]`` eps, ``P[23:25]`` constant of the additive perturbation,
``P[25]`` its number of terms, ``P[26]`` additive flag.  From ``P[32]``: w
terms ``(k1, k2, cos1, cos2, sin1, sin2)``; shear blocks ``(axis, scale,
(k, cos, sin) * terms)``; additive terms like w.

Sphere: ``P[9]`` coefficient mode (0: Re/Im of a, b, c, d; 1: rotation
vector), ``P[10]`` twist mode (0 none, 1 after, 2 conjugating), ``P[11]``
frame twist, ``P[12]`` eps, ``P[13]`` output dimension D of the coefficient
map, ``P[14]`` its number of terms, ``P[15]`` number of twist terms,
``P[16:24]`` constant (zero padded).  From ``P[32]``: coefficient terms
``(k1, k2, cos * D, sin * D)``, then twist terms ``(k, cos, sin)``.

A state is a length-5 array ``(x1, x2, f0, f1, f2)``: base point then
fibre point (torus fibres use ``f0, f1``; sphere fibres a unit vector).
"""

import numpy as np
from numba import njit

TWO_PI = 2.0 * np.pi

TORUS = 0
SPHERE = 1
DATA = 32


@njit(cache=True)
def wrap01(a):
    a = a - np.floor(a)
    if a >= 1.0:
        a = 0.0
    return a


@njit(cache=True)
def wrap_half(a):
    return a - np.floor(a + 0.5)


@njit(cache=True)
def base_step(P, x0, x1):
    return wrap01(P[1] * x0 + P[2] * x1), wrap01(P[3] * x0 + P[4] * x1)


@njit(cache=True)
def base_back(P, x0, x1):
    return wrap01(P[5] * x0 + P[6] * x1), wrap01(P[7] * x0 + P[8] * x1)


@njit(cache=True)
def _map2(P, off, m, c0, c1, x0, x1):
    """Two-output Fourier map stored as 6-value terms at P[off:]."""
    o0 = c0
    o1 = c1
    for j in range(m):
        b = off + 6 * j
        ph = TWO_PI * (P[b] * x0 + P[b + 1] * x1)
        c = np.cos(ph)
        s = np.sin(ph)
        o0 += P[b + 2] * c + P[b + 4] * s
        o1 += P[b + 3] * c + P[b + 5] * s
    return o0, o1


@njit(cache=True)
def _map2_jac(P, off, m, x0, x1):
    j00 = 0.0
    j01 = 0.0
    j10 = 0.0
    j11 = 0.0
    for j in range(m):
        b = off + 6 * j
        ph = TWO_PI * (P[b] * x0 + P[b + 1] * x1)
        c = np.cos(ph)
        s = np.sin(ph)
        a0 = TWO_PI * (P[b + 4] * c - P[b + 2] * s)
        a1 = TWO_PI * (P[b + 5] * c - P[b + 3] * s)
        j00 += a0 * P[b]
        j01 += a0 * P[b + 1]
        j10 += a1 * P[b]
        j11 += a1 * P[b + 1]
    return j00, j01, j10, j11


@njit(cache=True)
def _series(P, off, m, t):
    """Value and derivative of a one-variable series with (k, cos, sin) terms."""
    val = 0.0
    der = 0.0
    for j in range(m):
        b = off + 3 * j
        k = P[b]
        ph = TWO_PI * k * t
        c = np.cos(ph)
        s = np.sin(ph)
        val += P[b + 1] * c + P[b + 2] * s
        der += TWO_PI * k * (P[b + 2] * c - P[b + 1] * s)
    return val, der


# ---------------------------------------------------------------- torus fibre


@njit(cache=True)
def _offsets(P):
    mw = int(P[19])
    ns = int(P[20])
    ms = int(P[21])
    off_s = DATA + 6 * mw
    off_p = off_s + ns * (2 + 3 * ms)
    return mw, ns, ms, off_s, off_p


@njit(cache=True)
def torus_fibre_s(P, x0, x1, v0, v1):
    """Unreduced fibre image over base x and its derivative entries."""
    mw, ns, ms, off_s, off_p = _offsets(P)
    a0 = v0
    a1 = v1
    d00 = 1.0
    d01 = 0.0
    d10 = 0.0
    d11 = 1.0
    for j in range(ns):
        b = off_s + j * (2 + 3 * ms)
        scale = P[b + 1]
        if P[b] == 0.0:
            val, der = _series(P, b + 2, ms, a1)
            a0 = a0 + scale * val
            dd = scale * der
            d00 = d00 + dd * d10
            d01 = d01 + dd * d11
        else:
            val, der = _series(P, b + 2, ms, a0)
            a1 = a1 + scale * val
            dd = scale * der
            d10 = d10 + dd * d00
            d11 = d11 + dd * d01
    w0, w1 = _map2(P, DATA, mw, P[17], P[18], x0, x1)
    u0 = P[9] * a0 + P[10] * a1 + w0
    u1 = P[11] * a0 + P[12] * a1 + w1
    j00 = P[9] * d00 + P[10] * d10
    j01 = P[9] * d01 + P[10] * d11
    j10 = P[11] * d00 + P[12] * d10
    j11 = P[11] * d01 + P[12] * d11
    if P[26] != 0.0:
        eps = P[22]
        mp = int(P[25])
        p0, p1 = _map2(P, off_p, mp, P[23], P[24], v0, v1)
        q00, q01, q10, q11 = _map2_jac(P, off_p, mp, v0, v1)
        u0 += eps * p0
        u1 += eps * p1
        j00 += eps * q00
        j01 += eps * q01
        j10 += eps * q10
        j11 += eps * q11
    return u0, u1, j00, j01, j10, j11


@njit(cache=True)
def torus_fibre_inverse(P, x0, x1, u0, u1):
    """Solve Gamma_x(v) = u mod 1.  Returns (v0, v1, ok)."""
    mw, ns, ms, off_s, off_p = _offsets(P)
    w0, w1 = _map2(P, DATA, mw, P[17], P[18], x0, x1)
    b0 = u0 - w0
    b1 = u1 - w1
    a0 = P[13] * b0 + P[14] * b1
    a1 = P[15] * b0 + P[16] * b1
    for j in range(ns - 1, -1, -1):
        b = off_s + j * (2 + 3 * ms)
        if P[b] == 0.0:
            val, der = _series(P, b + 2, ms, a1)
            a0 = a0 - P[b + 1] * val
        else:
            val, der = _series(P, b + 2, ms, a0)
            a1 = a1 - P[b + 1] * val
    if P[26] == 0.0:
        return wrap01(a0), wrap01(a1), True
    # Newton on the torus, started from the inverse without the additive part
    v0 = a0
    v1 = a1
    for _ in range(60):
        g0, g1, j00, j01, j10, j11 = torus_fibre_s(P, x0, x1, v0, v1)
        r0 = wrap_half(g0 - u0)
        r1 = wrap_half(g1 - u1)
        if abs(r0) + abs(r1) < 1e-14:
            return wrap01(v0), wrap01(v1), True
        det = j00 * j11 - j01 * j10
        if det == 0.0:
            break
        v0 -= (j11 * r0 - j01 * r1) / det
        v1 -= (-j10 * r0 + j00 * r1) / det
    g0, g1, j00, j01, j10, j11 = torus_fibre_s(P, x0, x1, v0, v1)
    ok = abs(wrap_half(g0 - u0)) + abs(wrap_half(g1 - u1)) < 1e-11
    return wrap01(v0), wrap01(v1), ok


# --------------------------------------------------------------- sphere fibre


@njit(cache=True)
def sphere_coeffs(P, x0, x1):
    D = int(P[13])
    mc = int(P[14])
    o0 = P[16]
    o1 = P[17]
    o2 = P[18]
    o3 = P[19]
    o4 = P[20]
    o5 = P[21]
    o6 = P[22]
    o7 = P[23]
    full = D == 8
    for j in range(mc):
        b = DATA + j * (2 + 2 * D)
        ph = TWO_PI * (P[b] * x0 + P[b + 1] * x1)
        c = np.cos(ph)
        s = np.sin(ph)
        cb = b + 2
        sb = b + 2 + D
        o0 += P[cb] * c + P[sb] * s
        o1 += P[cb + 1] * c + P[sb + 1] * s
        o2 += P[cb + 2] * c + P[sb + 2] * s
        if full:
            o3 += P[cb + 3] * c + P[sb + 3] * s
            o4 += P[cb + 4] * c + P[sb + 4] * s
            o5 += P[cb + 5] * c + P[sb + 5] * s
            o6 += P[cb + 6] * c + P[sb + 6] * s
            o7 += P[cb + 7] * c + P[sb + 7] * s
    if P[9] == 0.0:
        a = complex(o0, o1)
        b_ = complex(o2, o3)
        c_ = complex(o4, o5)
        d = complex(o6, o7)
        s_ = np.sqrt(a * d - b_ * c_)
        return a / s_, b_ / s_, c_ / s_, d / s_
    th = np.sqrt(o0 * o0 + o1 * o1 + o2 * o2)
    ch = np.cos(0.5 * th)
    # sin(th/2)/th, regular at th = 0
    if th < 1e-8:
        sf = 0.5 - th * th / 48.0
    else:
        sf = np.sin(0.5 * th) / th
    n1 = sf * o0
    n2 = sf * o1
    n3 = sf * o2
    return complex(ch, -n3), complex(-n2, -n1), complex(n2, -n1), complex(ch, n3)


@njit(cache=True)
def to_homog(p0, p1, p2):
    """Chart coordinates: (h1, h2, north) with h = (z, 1) or (1, w)."""
    if p2 <= 0.0:
        return complex(p0, p1) / (1.0 - p2), complex(1.0, 0.0), True
    return complex(1.0, 0.0), complex(p0, -p1) / (1.0 + p2), False


@njit(cache=True)
def from_homog(h1, h2):
    n1 = h1.real ** 2 + h1.imag ** 2
    n2 = h2.real ** 2 + h2.imag ** 2
    t = h1 * h2.conjugate()
    s = n1 + n2
    return 2.0 * t.real / s, 2.0 * t.imag / s, (n1 - n2) / s


@njit(cache=True)
def frame_s(p0, p1, p2):
    """Orthonormal tangent frame at p as (e1, e2) entries, from the chart
    in use at p (north chart if p2 <= 0, south chart otherwise)."""
    h1, h2, north = to_homog(p0, p1, p2)
    u = h1 if north else h2
    x = u.real
    y = u.imag
    s = 1.0 + x * x + y * y
    a0 = (s - 2 * x * x) / s
    a1 = -2 * x * y / s
    a2 = 2 * x / s
    b0 = -2 * x * y / s
    b1 = (s - 2 * y * y) / s
    b2 = 2 * y / s
    if not north:
        a1 = -a1
        a2 = -a2
        b1 = -b1
        b2 = -b2
    return a0, a1, a2, b0, b1, b2


@njit(cache=True)
def sphere_frame(p0, p1, p2, E):
    a0, a1, a2, b0, b1, b2 = frame_s(p0, p1, p2)
    E[0, 0] = a0
    E[1, 0] = a1
    E[2, 0] = a2
    E[0, 1] = b0
    E[1, 1] = b1
    E[2, 1] = b2


@njit(cache=True)
def moebius_apply(a, b, c, d, p0, p1, p2):
    """Image point and complex frame derivative of a unimodular Moebius map."""
    h1, h2, north_in = to_homog(p0, p1, p2)
    u_in = h1 if north_in else h2
    k1 = a * h1 + b * h2
    k2 = c * h1 + d * h2
    north_out = abs(k1) <= abs(k2)
    if north_out:
        u_out = k1 / k2
        X = k2
    else:
        u_out = k2 / k1
        X = k1
    sgn = 1.0
    if not north_in:
        sgn = -sgn
    if not north_out:
        sgn = -sgn
    D = sgn / (X * X)
    jc = D * (1.0 + abs(u_in) ** 2) / (1.0 + abs(u_out) ** 2)
    q0, q1, q2 = from_homog(k1, k2)
    return q0, q1, q2, jc


@njit(cache=True)
def _twist(P, p0, p1, p2, sign):
    """Twist (sign=+1) or its inverse (sign=-1) about the polar axis.

    Returns the image and the frame derivative entries.
    """
    D = int(P[13])
    off = DATA + int(P[14]) * (2 + 2 * D)
    psi, dpsi = _series(P, off, int(P[15]), p2)
    th = sign * P[12] * psi
    dth = sign * P[12] * dpsi
    c = np.cos(th)
    s = np.sin(th)
    q0 = c * p0 - s * p1
    q1 = s * p0 + c * p1
    q2 = p2
    # D = R(th) + (R'(th) p) dth e3^T
    r0 = (-s * p0 - c * p1) * dth
    r1 = (c * p0 - s * p1) * dth
    a0, a1, a2, b0, b1, b2 = frame_s(p0, p1, p2)
    e0, e1, e2, f0, f1, f2 = frame_s(q0, q1, q2)
    da0 = c * a0 - s * a1 + r0 * a2
    da1 = s * a0 + c * a1 + r1 * a2
    db0 = c * b0 - s * b1 + r0 * b2
    db1 = s * b0 + c * b1 + r1 * b2
    j00 = e0 * da0 + e1 * da1 + e2 * a2
    j10 = f0 * da0 + f1 * da1 + f2 * a2
    j01 = e0 * db0 + e1 * db1 + e2 * b2
    j11 = f0 * db0 + f1 * db1 + f2 * b2
    return q0, q1, q2, j00, j01, j10, j11


@njit(cache=True)
def _mul(a00, a01, a10, a11, b00, b01, b10, b11):
    return (a00 * b00 + a01 * b10, a00 * b01 + a01 * b11,
            a10 * b00 + a11 * b10, a10 * b01 + a11 * b11)


@njit(cache=True)
def sphere_fibre_s(P, x0, x1, p0, p1, p2):
    """Fibre image of p over base x and the frame derivative entries."""
    a, b, c, d = sphere_coeffs(P, x0, x1)
    mode = P[10]
    if mode == 0.0:
        q0, q1, q2, jc = moebius_apply(a, b, c, d, p0, p1, p2)
        j00 = jc.real
        j01 = -jc.imag
        j10 = jc.imag
        j11 = jc.real
    else:
        s0, s1, s2 = p0, p1, p2
        k00, k01, k10, k11 = 1.0, 0.0, 0.0, 1.0
        if mode == 2.0:
            s0, s1, s2, k00, k01, k10, k11 = _twist(P, p0, p1, p2, -1.0)
        m0, m1, m2, jc = moebius_apply(a, b, c, d, s0, s1, s2)
        q0, q1, q2, t00, t01, t10, t11 = _twist(P, m0, m1, m2, 1.0)
        j00, j01, j10, j11 = _mul(t00, t01, t10, t11, jc.real, -jc.imag, jc.imag, jc.real)
        j00, j01, j10, j11 = _mul(j00, j01, j10, j11, k00, k01, k10, k11)
    ft = P[11]
    if ft != 0.0:
        # frames rotated by a point-dependent angle
        bi = ft * (p0 + 2.0 * p1 + 3.0 * p2)
        bo = ft * (q0 + 2.0 * q1 + 3.0 * q2)
        ci = np.cos(bi)
        si = np.sin(bi)
        co = np.cos(bo)
        so = np.sin(bo)
        j00, j01, j10, j11 = _mul(j00, j01, j10, j11, ci, -si, si, ci)
        j00, j01, j10, j11 = _mul(co, so, -so, co, j00, j01, j10, j11)
    return q0, q1, q2, j00, j01, j10, j11


@njit(cache=True)
def sphere_fibre_inverse(P, x0, x1, q0, q1, q2):
    """Preimage of q under the fibre map over base x."""
    a, b, c, d = sphere_coeffs(P, x0, x1)
    mode = P[10]
    if mode != 0.0:
        q0, q1, q2, _, _, _, _ = _twist(P, q0, q1, q2, -1.0)
    p0, p1, p2, jc = moebius_apply(d, -b, -c, a, q0, q1, q2)
    if mode == 2.0:
        p0, p1, p2, _, _, _, _ = _twist(P, p0, p1, p2, 1.0)
    return p0, p1, p2


# --------------------------------------------------------------- generic step


@njit(cache=True)
def fibre_s(P, x0, x1, f0, f1, f2):
    """Fibre map over base x (base held fixed): image and derivative."""
    if P[0] == 0.0:
        u0, u1, j00, j01, j10, j11 = torus_fibre_s(P, x0, x1, f0, f1)
        return wrap01(u0), wrap01(u1), 0.0, j00, j01, j10, j11
    return sphere_fibre_s(P, x0, x1, f0, f1, f2)


@njit(cache=True)
def fibre_inv_s(P, x0, x1, u0, u1, u2):
    """Preimage under the fibre map over base x, with success flag."""
    if P[0] == 0.0:
        v0, v1, ok = torus_fibre_inverse(P, x0, x1, u0, u1)
        return v0, v1, 0.0, ok
    p0, p1, p2 = sphere_fibre_inverse(P, x0, x1, u0, u1, u2)
    return p0, p1, p2, True


@njit(cache=True)
def fibre_apply(P, x0, x1, f, out, J):
    q0, q1, q2, j00, j01, j10, j11 = fibre_s(P, x0, x1, f[0], f[1], f[2])
    out[0] = q0
    out[1] = q1
    out[2] = q2
    J[0, 0] = j00
    J[0, 1] = j01
    J[1, 0] = j10
    J[1, 1] = j11


@njit(cache=True)
def fibre_invert(P, x0, x1, u, out):
    p0, p1, p2, ok = fibre_inv_s(P, x0, x1, u[0], u[1], u[2])
    out[0] = p0
    out[1] = p1
    out[2] = p2
    return ok


@njit(cache=True)
def step(P, s, J):
    """Advance state s in place by one iterate; derivative into J."""
    q0, q1, q2, j00, j01, j10, j11 = fibre_s(P, s[0], s[1], s[2], s[3], s[4])
    y0, y1 = base_step(P, s[0], s[1])
    s[0] = y0
    s[1] = y1
    s[2] = q0
    s[3] = q1
    s[4] = q2
    J[0, 0] = j00
    J[0, 1] = j01
    J[1, 0] = j10
    J[1, 1] = j11


@njit(cache=True)
def step_back(P, s):
    """Move state s one iterate backward in place.  Returns success flag."""
    x0, x1 = base_back(P, s[0], s[1])
    p0, p1, p2, ok = fibre_inv_s(P, x0, x1, s[2], s[3], s[4])
    s[0] = x0
    s[1] = x1
    s[2] = p0
    s[3] = p1
    s[4] = p2
    return ok


# ------------------------------------------------------- batched primitives


@njit(cache=True)
def batch_step(P, states, n):
    out = states.copy()
    jac = np.zeros((states.shape[0], 2, 2))
    J = np.empty((2, 2))
    for i in range(states.shape[0]):
        s = out[i]
        for _ in range(n):
            step(P, s, J)
        if n == 1:
            jac[i] = J
    return out, jac


@njit(cache=True)
def batch_jacobian_n(P, states, n):
    """Derivative of the n-th iterate composed along each orbit."""
    M = np.empty((states.shape[0], 2, 2))
    J = np.empty((2, 2))
    s = np.empty(5)
    for i in range(states.shape[0]):
        s[:] = states[i]
        p00, p01, p10, p11 = 1.0, 0.0, 0.0, 1.0
        for _ in range(n):
            step(P, s, J)
            p00, p01, p10, p11 = _mul(J[0, 0], J[0, 1], J[1, 0], J[1, 1], p00, p01, p10, p11)
        M[i, 0, 0] = p00
        M[i, 0, 1] = p01
        M[i, 1, 0] = p10
        M[i, 1, 1] = p11
    return M


@njit(cache=True)
def batch_back(P, states, n):
    out = states.copy()
    ok = np.ones(states.shape[0], dtype=np.bool_)
    for i in range(states.shape[0]):
        s = out[i]
        for _ in range(n):
            if not step_back(P, s):
                ok[i] = False
    return out, ok


# ------------------------------------------------------------ exponent drivers


@njit(cache=True)
def qr_orbit(P, state, angle, n_iter, checkpoints):
    """Per-step Gram-Schmidt accumulation along one orbit.

    Returns (sum log r11, sum log |r22|, sum log |det J|, partial top
    exponents at the checkpoints, fault flag).
    """
    s = state.copy()
    J = np.empty((2, 2))
    q0 = np.cos(angle)
    q1 = np.sin(angle)
    s1 = 0.0
    s2 = 0.0
    sd = 0.0
    cp = np.zeros(checkpoints.shape[0])
    ci = 0
    for it in range(n_iter):
        step(P, s, J)
        m0 = J[0, 0] * q0 + J[0, 1] * q1
        m1 = J[1, 0] * q0 + J[1, 1] * q1
        r11 = np.sqrt(m0 * m0 + m1 * m1)
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        if not (r11 > 0.0 and np.isfinite(r11) and det != 0.0):
            return s1, s2, sd, cp, True
        # the frame (q, q_perp) is a rotation, so r22 = det(J) / r11
        lr = np.log(r11)
        ld = np.log(abs(det))
        s1 += lr
        s2 += ld - lr
        sd += ld
        q0 = m0 / r11
        q1 = m1 / r11
        while ci < checkpoints.shape[0] and checkpoints[ci] == it + 1:
            cp[ci] = s1 / (it + 1)
            ci += 1
    return s1, s2, sd, cp, False


@njit(cache=True)
def vector_orbit(P, state, angle, n_iter, renorm_every):
    """Top exponent by plain vector iteration with periodic rescaling, and
    the exterior-square (determinant) log sum accumulated separately."""
    s = state.copy()
    J = np.empty((2, 2))
    v0 = np.cos(angle)
    v1 = np.sin(angle)
    top = 0.0
    ext = 0.0
    for it in range(n_iter):
        step(P, s, J)
        a = J[0, 0] * v0 + J[0, 1] * v1
        b = J[1, 0] * v0 + J[1, 1] * v1
        v0 = a
        v1 = b
        ext += np.log(abs(J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]))
        if (it + 1) % renorm_every == 0 or it == n_iter - 1:
            nv = np.sqrt(v0 * v0 + v1 * v1)
            top += np.log(nv)
            v0 /= nv
            v1 /= nv
    return top, ext


# ------------------------------------------------------------------ holonomy


@njit(cache=True)
def holonomy_truncated(P, x, f, e, t, rate, n, direction, want_jac):
    """Truncated holonomy from the fibre over x to the fibre over y = x + t e.

    direction=+1 is the unstable holonomy: pull back n steps along the
    orbit of x, then push forward along the orbit of y.  direction=-1 is the
    stable holonomy with forward and backward exchanged.  ``rate`` is the
    leaf multiplier of one backward step (unstable) or one forward step
    (stable), so the k-th orbit point of y is x_k + t * rate**k * e, which
    avoids amplifying rounding errors along the way.

    Returns (image fibre point, derivative matrix, ok).
    """
    xs = np.empty((n + 1, 2))
    xs[0, 0] = x[0]
    xs[0, 1] = x[1]
    c0 = f[0]
    c1 = f[1]
    c2 = f[2]
    ok = True
    # a: D f^n along the x-orbit, b: along the y-orbit
    a00, a01, a10, a11 = 1.0, 0.0, 0.0, 1.0
    b00, b01, b10, b11 = 1.0, 0.0, 0.0, 1.0
    for k in range(n):
        if direction > 0:
            z0, z1 = base_back(P, xs[k, 0], xs[k, 1])
            xs[k + 1, 0] = z0
            xs[k + 1, 1] = z1
            c0, c1, c2, good = fibre_inv_s(P, z0, z1, c0, c1, c2)
            ok = ok and good
            if want_jac:
                _, _, _, j00, j01, j10, j11 = fibre_s(P, z0, z1, c0, c1, c2)
                a00, a01, a10, a11 = _mul(a00, a01, a10, a11, j00, j01, j10, j11)
        else:
            c0, c1, c2, j00, j01, j10, j11 = fibre_s(P, xs[k, 0], xs[k, 1], c0, c1, c2)
            if want_jac:
                a00, a01, a10, a11 = _mul(j00, j01, j10, j11, a00, a01, a10, a11)
            z0, z1 = base_step(P, xs[k, 0], xs[k, 1])
            xs[k + 1, 0] = z0
            xs[k + 1, 1] = z1
    for k in range(n, 0, -1):
        if direction > 0:
            sc = t * rate ** k
            y0 = wrap01(xs[k, 0] + sc * e[0])
            y1 = wrap01(xs[k, 1] + sc * e[1])
            c0, c1, c2, j00, j01, j10, j11 = fibre_s(P, y0, y1, c0, c1, c2)
            if want_jac:
                b00, b01, b10, b11 = _mul(j00, j01, j10, j11, b00, b01, b10, b11)
        else:
            sc = t * rate ** (k - 1)
            y0 = wrap01(xs[k - 1, 0] + sc * e[0])
            y1 = wrap01(xs[k - 1, 1] + sc * e[1])
            c0, c1, c2, good = fibre_inv_s(P, y0, y1, c0, c1, c2)
            ok = ok and good
            if want_jac:
                _, _, _, j00, j01, j10, j11 = fibre_s(P, y0, y1, c0, c1, c2)
                b00, b01, b10, b11 = _mul(b00, b01, b10, b11, j00, j01, j10, j11)
    out = np.empty(3)
    out[0] = c0
    out[1] = c1
    out[2] = c2
    M = np.eye(2)
    if want_jac:
        A = np.array([[a00, a01], [a10, a11]])
        B = np.array([[b00, b01], [b10, b11]])
        if direction > 0:
            M = B @ np.linalg.inv(A)
        else:
            M = np.linalg.inv(B) @ A
    return out, M, ok


# ----------------------------------------------------------- disintegration


@njit(cache=True)
def cell_index(P, s, nb, nf):
    """Cell of a state on an nb x nb base grid times an nf x nf fibre grid.

    Sphere fibres use (height, longitude) cells, which have equal area.
    """
    i0 = min(int(s[0] * nb), nb - 1)
    i1 = min(int(s[1] * nb), nb - 1)
    if P[0] == TORUS:
        f0 = min(int(s[2] * nf), nf - 1)
        f1 = min(int(s[3] * nf), nf - 1)
    else:
        f0 = min(int((s[4] + 1.0) * 0.5 * nf), nf - 1)
        ph = np.arctan2(s[3], s[2])
        if ph < 0.0:
            ph += 2.0 * np.pi
        f1 = min(int(ph / (2.0 * np.pi) * nf), nf - 1)
    return ((i0 * nb + i1) * nf + f0) * nf + f1


@njit(cache=True)
def ensemble_histogram(P, states, angles, burn_in, n_steps, nb, nf, n_bins, hist):
    """Time-averaged projective ensemble.

    Every particle is a state with a fan of line directions (angles in
    [0, pi)) moved by the projectivised centre derivative.  After burn_in
    steps, each visit adds the particle's directions to the histogram of its
    cell; particle i goes to half i % 2 so two independent estimates come
    out of one run.  hist has shape (2, n_cells, n_bins) and is added to.
    """
    J = np.empty((2, 2))
    K = angles.shape[1]
    width = np.pi / n_bins
    for i in range(states.shape[0]):
        s = states[i].copy()
        th = angles[i].copy()
        half = i % 2
        for n in range(burn_in + n_steps):
            step(P, s, J)
            for k in range(K):
                c = np.cos(th[k])
                d = np.sin(th[k])
                u0 = J[0, 0] * c + J[0, 1] * d
                u1 = J[1, 0] * c + J[1, 1] * d
                t = np.arctan2(u1, u0)
                if t < 0.0:
                    t += np.pi
                if t >= np.pi:
                    t -= np.pi
                th[k] = t
            if n >= burn_in:
                cell = cell_index(P, s, nb, nf)
                for k in range(K):
                    b = min(int(th[k] / width), n_bins - 1)
                    hist[half, cell, b] += 1
