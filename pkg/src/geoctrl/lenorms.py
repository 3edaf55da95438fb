"""Local energy norms of gridded space-time functions.

Shells are A_0 = {|x| <= 1} and A_j = {2^(j-1) < |x| <= 2^j}; a grid node
belongs to the shell containing it (no partial-cell weights). Space sums
are cell sums h^3 * sum, time integrals use the trapezoidal rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridFunction:
    """Samples u(t_k, x) on the lattice {-L + i h}^3.

    values has shape [n_t, *components, n, n, n]; components (e.g. the four
    space-time derivatives) are combined pointwise in l^2 by the norms.
    """
    values: np.ndarray
    L: float
    h: float
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        if not (self.L > 0 and self.h > 0 and self.dt > 0):
            raise ValueError("L, h and dt must be positive")
        v = np.asarray(self.values, dtype=float)
        if v.ndim < 4:
            raise ValueError("values must have shape [n_t, ..., n, n, n]")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.shape[-1]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.values.shape[0])

    def axis(self):
        return -self.L + self.h * np.arange(self.n)

    def radius(self):
        ax = self.axis()
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.sqrt(X * X + Y * Y + Z * Z)

    def scaled(self, c):
        return GridFunction(c * self.values, self.L, self.h, self.dt, self.t0)


def shell_index(r):
    """Dyadic shell label j of each radius."""
    r = np.asarray(r, dtype=float)
    j = np.ceil(np.log2(np.maximum(r, 1e-300)))
    return np.where(r <= 1.0, 0, j).astype(int)


def time_weights(n_t, dt):
    if n_t == 1:
        return np.array([dt])
    w = np.full(n_t, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _pointwise_sq(u: GridFunction):
    """sum over time (trapezoid) of |u|^2, as a field on the grid."""
    v = u.values
    sq = v * v
    while sq.ndim > 4:
        sq = sq.sum(axis=1)
    return np.tensordot(time_weights(v.shape[0], u.dt), sq, axes=(0, 0))


def annulus_terms(u: GridFunction, weight_exponent=-0.5):
    """Per-shell weighted L^2_t L^2_x norms.

    Returns (labels, norms, truncated) where truncated[k] marks shells that
    reach past the box.
    """
    r = u.radius()
    lab = shell_index(r)
    field = _pointwise_sq(u) * (1.0 + r * r) ** weight_exponent
    labels = np.unique(lab)
    sums = np.bincount(lab.ravel(), weights=field.ravel())[labels] * u.h ** 3
    outer = np.where(labels == 0, 1.0, 2.0 ** labels)
    truncated = outer > u.L
    return labels, np.sqrt(sums), truncated


def le_norm(u: GridFunction, weight_exponent=-0.5):
    """sup over shells of ||<x>^w u||_{L^2 L^2(shell)}; w = -1/2 gives LE."""
    _, norms, _ = annulus_terms(u, weight_exponent)
    return float(norms.max()) if norms.size else 0.0


def lestar_norm(f: GridFunction, weight_exponent=0.5):
    """Sum over shells of ||<x>^{1/2} f||_{L^2 L^2(shell)}."""
    _, norms, _ = annulus_terms(f, weight_exponent)
    return float(norms.sum())


def l2l2_norm(u: GridFunction):
    return float(math.sqrt(_pointwise_sq(u).sum() * u.h ** 3))


def gradient(u: GridFunction):
    """Space-time gradient (d_t, d_1, d_2, d_3) by centered differences
    (one-sided at the edges)."""
    v = u.values
    if v.ndim != 4:
        raise ValueError("gradient needs a scalar grid function")
    dt = np.gradient(v, u.dt, axis=0) if v.shape[0] > 1 else np.zeros_like(v)
    dx = np.gradient(v, u.h, axis=(1, 2, 3))
    return GridFunction(np.stack([dt, *dx], axis=1), u.L, u.h, u.dt, u.t0)


def le1_norm(u: GridFunction, du: GridFunction | None = None):
    """LE(du) + LE(<x>^-1 u), the derivative components combined in l^2."""
    if du is None:
        du = gradient(u)
    return le_norm(du, -0.5) + le_norm(u, -1.5)


def norm_series_csv(path, times, le_partials, energy):
    """Write t, per-shell LE partial sums and energy as CSV."""
    le_partials = np.atleast_2d(np.asarray(le_partials, dtype=float))
    cols = [f"le_shell{j}" for j in range(le_partials.shape[1])]
    data = np.column_stack([times, le_partials, energy])
    np.savetxt(path, data, delimiter=",", header=",".join(["t", *cols, "energy"]), comments="", fmt="%.17g")
