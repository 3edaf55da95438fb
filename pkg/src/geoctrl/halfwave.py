"""Principal symbol, half-wave symbols b+/b- and the characteristic branches.

Phase-space points are handled either as PhasePoint objects or as state
arrays with last axis (t, x1, x2, x3, tau, xi1, xi2, xi3). All batch
routines are written so that complex inputs pass through unchanged, which
lets callers take complex-step derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMetric, ZeroDivisor


@dataclass(frozen=True)
class PhasePoint:
    t: float
    x: tuple
    tau: float
    xi: tuple

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        object.__setattr__(self, "xi", tuple(float(v) for v in self.xi))
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "tau", float(self.tau))

    def as_array(self):
        return np.array([self.t, *self.x, self.tau, *self.xi])

    @classmethod
    def from_array(cls, s):
        s = np.asarray(s, dtype=float)
        return cls(s[0], s[1:4], s[4], s[5:8])


def as_state(w):
    return w.as_array() if isinstance(w, PhasePoint) else np.asarray(w)


def branch_sign(branch):
    if branch in ("plus", "+", 1, +1.0):
        return 1.0
    if branch in ("minus", "-", -1, -1.0):
        return -1.0
    raise ValueError(f"unknown half-wave branch {branch!r}")


def principal_symbol(metric, w):
    """p = g^{00} tau^2 + 2 tau g^{0j} xi_j + g^{ij} xi_i xi_j."""
    s = as_state(w)
    g = metric.g_inv(s[..., 1:4])
    zeta = s[..., 4:8]
    val = np.einsum("...a,...ab,...b->...", zeta, g, zeta)
    return float(val) if np.ndim(val) == 0 else val


def _symbol_parts(metric, x, xi):
    g = metric.g_inv(x)
    A = -g[..., 0, 0]
    if np.any(np.real(A) <= 0):
        raise DegenerateMetric("g^00 must be negative")
    B = np.einsum("...j,...j->...", g[..., 0, 1:], xi)
    C = np.einsum("...i,...ij,...j->...", xi, g[..., 1:, 1:], xi)
    beta, gamma = B / A, C / A
    disc = beta * beta + gamma
    if np.any(np.real(disc) <= 0):
        raise DegenerateMetric("non-positive discriminant in the half-wave factorization")
    return g, A, B, C, beta, gamma, np.sqrt(disc)


def b_pm(metric, x, xi, branch):
    """b+- = beta +- sqrt(beta^2 + gamma) with beta = g^{0j}xi_j/(-g^{00}),
    gamma = g^{ij}xi_i xi_j/(-g^{00})."""
    sgn = branch_sign(branch)
    x, xi = np.asarray(x), np.asarray(xi)
    if metric.isotropic:
        r = np.sqrt(np.sum(x * x, axis=-1))
        val = sgn * metric.speed(r) * np.sqrt(np.sum(xi * xi, axis=-1))
    else:
        _, _, _, _, beta, _, root = _symbol_parts(metric, x, xi)
        val = beta + sgn * root
    return float(val) if np.ndim(val) == 0 else val


def b_and_grads(metric, x, xi, branch):
    """Return (b, grad_x b, grad_xi b) for a batch of (x, xi)."""
    sgn = branch_sign(branch)
    x, xi = np.asarray(x), np.asarray(xi)
    if metric.isotropic:
        r = np.sqrt(np.sum(x * x, axis=-1))
        rs = np.where(np.real(r) > 1e-14, r, 1e-14)
        k = np.sqrt(np.sum(xi * xi, axis=-1))
        c, c1 = metric.speed(r), metric.speed_d1(r)
        b = sgn * c * k
        bx = (sgn * c1 * k / rs)[..., None] * x
        bxi = (sgn * c / k)[..., None] * xi
        return b, bx, bxi
    g, A, B, C, beta, gamma, root = _symbol_parts(metric, x, xi)
    dg = metric.dg_inv(x)
    dA = -dg[..., 0, 0]
    dB = np.einsum("...kj,...j->...k", dg[..., 0, 1:], xi)
    dC = np.einsum("...i,...kij,...j->...k", xi, dg[..., 1:, 1:], xi)
    Ab = A[..., None]
    dbeta_x = dB / Ab - (B / A ** 2)[..., None] * dA
    dgamma_x = dC / Ab - (C / A ** 2)[..., None] * dA
    dbeta_xi = g[..., 0, 1:] / Ab
    dgamma_xi = 2.0 * np.einsum("...ij,...j->...i", g[..., 1:, 1:], xi) / Ab
    rb, betab = root[..., None], beta[..., None]
    bx = dbeta_x + sgn * (betab * dbeta_x + 0.5 * dgamma_x) / rb
    bxi = dbeta_xi + sgn * (betab * dbeta_xi + 0.5 * dgamma_xi) / rb
    return beta + sgn * root, bx, bxi


def char_branch(metric, w, tol=1e-8):
    """Which half-wave characteristic set w lies on: "plus", "minus" or "none"."""
    s = as_state(w)
    x, tau, xi = s[1:4], s[4], s[5:8]
    k = float(np.sqrt(np.sum(xi * xi)))
    if k == 0.0:
        raise ValueError("xi must be nonzero")
    if abs(tau - b_pm(metric, x, xi, "plus")) <= tol * k:
        return "plus"
    if abs(tau - b_pm(metric, x, xi, "minus")) <= tol * k:
        return "minus"
    return "none"


def phi_rescale(metric, w, branch):
    """(t, x, tau, xi) -> (t, x, tau/b, xi/b) with b = b+-(x, xi)."""
    s = as_state(w)
    b = np.asarray(b_pm(metric, s[..., 1:4], s[..., 5:8], branch))
    if np.any(b == 0):
        raise ZeroDivisor("b vanishes; xi must be nonzero")
    out = np.array(s, dtype=float, copy=True)
    out[..., 4:8] = s[..., 4:8] / b[..., None]
    return PhasePoint.from_array(out) if isinstance(w, PhasePoint) else out


def project_to_char(metric, t, x, xi, branch):
    """The point (t, x, b+-(x, xi), xi) on the chosen characteristic set."""
    return PhasePoint(t, x, b_pm(metric, np.asarray(x, float), np.asarray(xi, float), branch), xi)


def project_states(metric, states, branch):
    """Batch version of project_to_char acting on state arrays."""
    out = np.array(states, dtype=float, copy=True)
    out[..., 4] = b_pm(metric, out[..., 1:4], out[..., 5:8], branch)
    return out
