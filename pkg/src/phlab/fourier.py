"""Finite real Fourier data used to specify maps on T^2 and on the circle.

A :class:`TorusFourierMap` with ``dim`` outputs is

    F(x) = const + sum_j [cos_j * cos(2 pi k_j . x) + sin_j * sin(2 pi k_j . x)]

with integer frequency vectors ``k_j`` and real amplitude vectors.  Real
coefficients make the output real by construction; this is the same as
conjugate-symmetric complex coefficients.  A :class:`CircleFourier` is the
one-variable analogue with scalar output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TorusFourierMap:
    const: np.ndarray  # (dim,)
    ks: np.ndarray  # (m, 2) integer-valued floats
    cos: np.ndarray  # (m, dim)
    sin: np.ndarray  # (m, dim)

    @property
    def dim(self) -> int:
        return self.const.shape[0]

    @classmethod
    def zero(cls, dim: int = 2) -> "TorusFourierMap":
        return cls(np.zeros(dim), np.zeros((0, 2)), np.zeros((0, dim)), np.zeros((0, dim)))

    @classmethod
    def constant(cls, value) -> "TorusFourierMap":
        value = np.asarray(value, dtype=float)
        dim = value.shape[0]
        return cls(value, np.zeros((0, 2)), np.zeros((0, dim)), np.zeros((0, dim)))

    @classmethod
    def from_json(cls, data, dim: int) -> "TorusFourierMap":
        const = np.asarray(data.get("const", [0.0] * dim), dtype=float)
        terms = data.get("terms", [])
        ks = np.array([t["k"] for t in terms], dtype=float).reshape(-1, 2)
        cos = np.array([t.get("cos", [0.0] * dim) for t in terms], dtype=float).reshape(-1, dim)
        sin = np.array([t.get("sin", [0.0] * dim) for t in terms], dtype=float).reshape(-1, dim)
        if const.shape != (dim,):
            raise ValueError(f"const must have length {dim}")
        if np.any(np.mod(ks, 1) != 0):
            raise ValueError("frequencies must be integers")
        return cls(const, ks, cos, sin)

    def to_json(self):
        return {
            "const": self.const.tolist(),
            "terms": [
                {"k": [int(k[0]), int(k[1])], "cos": c.tolist(), "sin": s.tolist()}
                for k, c, s in zip(self.ks, self.cos, self.sin)
            ],
        }

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        phase = TWO_PI * (x @ self.ks.T)  # (..., m)
        return self.const + np.cos(phase) @ self.cos + np.sin(phase) @ self.sin

    def jacobian(self, x):
        """Derivative, shape (..., dim, 2)."""
        x = np.asarray(x, dtype=float)
        phase = TWO_PI * (x @ self.ks.T)
        # d/dx_l of cos(2 pi k.x) = -2 pi k_l sin(...)
        ds = -np.sin(phase)[..., :, None] * (TWO_PI * self.ks)  # (..., m, 2)
        dc = np.cos(phase)[..., :, None] * (TWO_PI * self.ks)
        return np.einsum("...ml,md->...dl", ds, self.cos) + np.einsum("...ml,md->...dl", dc, self.sin)

    def c0_norm(self) -> float:
        return float(np.abs(self.const).sum() + np.abs(self.cos).sum() + np.abs(self.sin).sum())

    def c1_norm(self) -> float:
        """Upper bound on sup|F| + sup|DF| from the coefficients."""
        kn = TWO_PI * np.linalg.norm(self.ks, axis=1) if len(self.ks) else np.zeros(0)
        amp = np.abs(self.cos).sum(axis=1) + np.abs(self.sin).sum(axis=1)
        return self.c0_norm() + float((kn * amp).sum())

    def c2_bound(self) -> float:
        kn = TWO_PI * np.linalg.norm(self.ks, axis=1) if len(self.ks) else np.zeros(0)
        amp = np.abs(self.cos).sum(axis=1) + np.abs(self.sin).sum(axis=1)
        return float((kn**2 * amp).sum())

    def is_zero(self) -> bool:
        return not (np.any(self.const) or np.any(self.cos) or np.any(self.sin))


@dataclass(frozen=True)
class CircleFourier:
    ks: np.ndarray  # (m,)
    cos: np.ndarray  # (m,)
    sin: np.ndarray  # (m,)

    @classmethod
    def zero(cls) -> "CircleFourier":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_json(cls, data) -> "CircleFourier":
        terms = data.get("terms", [])
        ks = np.array([t["k"] for t in terms], dtype=float)
        if np.any(np.mod(ks, 1) != 0):
            raise ValueError("frequencies must be integers")
        return cls(
            ks,
            np.array([t.get("cos", 0.0) for t in terms], dtype=float),
            np.array([t.get("sin", 0.0) for t in terms], dtype=float),
        )

    def to_json(self):
        return {
            "terms": [
                {"k": int(k), "cos": float(c), "sin": float(s)}
                for k, c, s in zip(self.ks, self.cos, self.sin)
            ]
        }

    def __call__(self, t):
        ph = TWO_PI * np.multiply.outer(np.asarray(t, dtype=float), self.ks)
        return np.cos(ph) @ self.cos + np.sin(ph) @ self.sin

    def derivative(self, t):
        ph = TWO_PI * np.multiply.outer(np.asarray(t, dtype=float), self.ks)
        return (-np.sin(ph) * TWO_PI * self.ks) @ self.cos + (np.cos(ph) * TWO_PI * self.ks) @ self.sin

    def sup_derivative_bound(self) -> float:
        return float((TWO_PI * np.abs(self.ks) * (np.abs(self.cos) + np.abs(self.sin))).sum())

    def c2_bound(self) -> float:
        return float(((TWO_PI * self.ks) ** 2 * (np.abs(self.cos) + np.abs(self.sin))).sum())
