"""Hamiltonian flows of p and of the half-wave symbols p+- = tau - b+-.

Adaptive integration goes through scipy's DOP853 with dense output. Large
ensembles where fixed-step smoothness matters (finite-difference stencils in
s, chart caches) use the vectorized RK4 in ``rk4_batch``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import BlowUp, StepFailure
from .halfwave import PhasePoint, as_state, b_and_grads, b_pm

BRANCHES = ("full_p", "plus", "minus")


def _rhs_isotropic_single(metric, y, branch):
    x1, x2, x3 = y[1], y[2], y[3]
    r = math.sqrt(x1 * x1 + x2 * x2 + x3 * x3)
    rs = max(r, 1e-14)
    c, c1 = float(metric.speed(r)), float(metric.speed_d1(r))
    k2 = y[5] * y[5] + y[6] * y[6] + y[7] * y[7]
    if branch == "full_p":
        v, f = 2.0 * c * c, -2.0 * c * c1 * k2 / rs
        return np.array([-2.0 * y[4], v * y[5], v * y[6], v * y[7], 0.0, f * x1, f * x2, f * x3])
    sgn = 1.0 if branch == "plus" else -1.0
    k = math.sqrt(k2)
    v, f = -sgn * c / k, sgn * c1 * k / rs
    return np.array([1.0, v * y[5], v * y[6], v * y[7], 0.0, f * x1, f * x2, f * x3])


def hamilton_rhs(metric, states, branch):
    """Hamilton vector field at a batch of states [..., 8]."""
    y = np.asarray(states)
    if y.ndim == 1 and metric.isotropic and y.dtype == np.float64:
        return _rhs_isotropic_single(metric, y.tolist(), branch)
    x, tau, xi = y[..., 1:4], y[..., 4], y[..., 5:8]
    out = np.zeros_like(y)
    if branch == "full_p":
        if metric.isotropic:
            r = np.sqrt(np.sum(x * x, axis=-1))
            rs = np.where(np.real(r) > 1e-14, r, 1e-14)
            c, c1 = metric.speed(r), metric.speed_d1(r)
            k2 = np.sum(xi * xi, axis=-1)
            out[..., 0] = -2.0 * tau
            out[..., 1:4] = (2.0 * c * c)[..., None] * xi
            out[..., 5:8] = (-2.0 * c * c1 * k2 / rs)[..., None] * x
            return out
        g = metric.g_inv(x)
        dg = metric.dg_inv(x)
        zeta = y[..., 4:8]
        gz = np.einsum("...ab,...b->...a", g, zeta)
        out[..., 0] = 2.0 * gz[..., 0]
        out[..., 1:4] = 2.0 * gz[..., 1:]
        out[..., 5:8] = -np.einsum("...a,...kab,...b->...k", zeta, dg, zeta)
        return out
    _, bx, bxi = b_and_grads(metric, x, xi, branch)
    out[..., 0] = 1.0
    out[..., 1:4] = -bxi
    out[..., 5:8] = bx
    return out


def rk4_batch(rhs, y0, h, n_steps, callback=None):
    """Classical RK4 on a batch of states with a per-row step h.

    ``callback(i, y)`` is called after each step (i counts from 1) and may
    return True to stop early.
    """
    y = np.array(y0, dtype=float, copy=True)
    hb = np.broadcast_to(np.asarray(h, dtype=float), y.shape[:-1])[..., None]
    for i in range(1, n_steps + 1):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * hb * k1)
        k3 = rhs(y + 0.5 * hb * k2)
        k4 = rhs(y + hb * k3)
        y = y + (hb / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if callback is not None and callback(i, y):
            break
    return y


def rk4_flow(metric, states, branch, s_total, max_step=0.05):
    """Fixed-step flow map states -> phi_{s_total}(states); s_total may be an array."""
    s_total = np.broadcast_to(np.asarray(s_total, dtype=float), np.shape(states)[:-1])
    n = max(1, int(np.ceil(np.max(np.abs(s_total)) / max_step))) if s_total.size else 1
    return rk4_batch(lambda y: hamilton_rhs(metric, y, branch), states, s_total / n, n)


@dataclass
class Trajectory:
    """Dense flow s -> phi_s(w0) on [s_lo, s_hi] with phi_0 = w0."""
    branch: str
    s: np.ndarray
    states: np.ndarray
    tol: float
    metric: object = None
    _pieces: list = field(default_factory=list, repr=False)

    @property
    def s_lo(self):
        return float(self.s[0])

    @property
    def s_hi(self):
        return float(self.s[-1])

    def __call__(self, s):
        """States at parameter(s) s, shape [..., 8]."""
        s = np.asarray(s, dtype=float)
        flat = s.reshape(-1)
        out = np.empty((flat.size, 8))
        for lo, hi, sol in self._pieces:
            m = (flat >= lo) & (flat <= hi)
            if np.any(m):
                if sol is None:
                    raise ValueError("trajectory was integrated without dense output")
                out[m] = sol(flat[m]).T
        bad = (flat < self.s_lo - 1e-12) | (flat > self.s_hi + 1e-12)
        if np.any(bad):
            raise ValueError("parameter outside trajectory span")
        return out.reshape(s.shape + (8,))

    def point(self, s):
        return PhasePoint.from_array(self(s))

    def to_csv(self, path):
        header = "s,t,x1,x2,x3,tau,xi1,xi2,xi3"
        np.savetxt(path, np.column_stack([self.s, self.states]), delimiter=",",
                   header=header, comments="", fmt="%.17g")


def _solve_one_side(metric, y0, branch, s_end, tol, max_step, dense=True):
    k0 = float(np.sqrt(np.sum(y0[5:8] ** 2)))

    def rhs(s, y):
        return hamilton_rhs(metric, y, branch)

    def too_big(s, y):
        return np.sqrt(np.sum(y[5:8] ** 2)) - 1e8 * k0

    def too_small(s, y):
        return np.sqrt(np.sum(y[5:8] ** 2)) - 1e-8 * k0

    too_big.terminal = too_small.terminal = True
    sol = solve_ivp(rhs, (0.0, s_end), y0, method="DOP853", rtol=tol, atol=tol,
                    dense_output=dense, events=[too_big, too_small], max_step=max_step)
    if sol.status == -1:
        raise StepFailure(sol.message, float(sol.t[-1]), sol.y[:, -1].copy())
    if sol.status == 1:
        raise BlowUp("|xi| left [1e-8, 1e8] |xi_0|", float(sol.t[-1]), sol.y[:, -1].copy())
    return sol


def integrate_flow(metric, w0, branch, s_span, tol=1e-9, max_step=np.inf, dense=True):
    """Integrate the flow of p (branch "full_p") or p+- from w0 at s = 0.

    ``s_span`` is either a number S (span [0, S] or [S, 0]) or a pair
    (s_lo, s_hi) with s_lo <= 0 <= s_hi. With dense=False only the step
    nodes are kept and the trajectory cannot be evaluated between them.
    """
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}")
    y0 = np.asarray(as_state(w0), dtype=float)
    if not np.any(y0[5:8] != 0):
        raise ValueError("initial xi must be nonzero")
    if np.ndim(s_span) == 0:
        s_lo, s_hi = min(0.0, float(s_span)), max(0.0, float(s_span))
    else:
        s_lo, s_hi = float(s_span[0]), float(s_span[1])
        if not s_lo <= 0.0 <= s_hi:
            raise ValueError("s_span must contain 0")
    pieces, s_parts, y_parts = [], [], []
    if s_lo < 0.0:
        sol = _solve_one_side(metric, y0, branch, s_lo, tol, max_step, dense)
        pieces.append((s_lo, 0.0, sol.sol))
        s_parts.append(sol.t[::-1][:-1])
        y_parts.append(sol.y[:, ::-1][:, :-1].T)
    if s_hi > 0.0:
        sol = _solve_one_side(metric, y0, branch, s_hi, tol, max_step, dense)
        pieces.append((0.0, s_hi, sol.sol))
        s_parts.append(sol.t)
        y_parts.append(sol.y.T)
    else:
        s_parts.append(np.array([0.0]))
        y_parts.append(y0[None, :])
    if not pieces:
        pieces.append((0.0, 0.0, lambda s: np.repeat(y0[:, None], np.size(s), axis=1)))
    return Trajectory(branch, np.concatenate(s_parts), np.concatenate(y_parts), tol, metric, pieces)


def reparam_match(metric, w0, r_span, tol=1e-9, n_check=2001):
    """Max distance between phi_{s(r)}(w0) and phi+_r(w0) over r in the span.

    s(r) solves ds/dr = 1 / (g^{00} p^-) along the p+ curve, s(0) = 0.
    """
    y0 = np.asarray(as_state(w0), dtype=float)
    r_end = float(r_span if np.ndim(r_span) == 0 else r_span[1])
    if r_end == 0.0:
        return 0.0

    def rhs(r, z):
        y = z[:8]
        dy = hamilton_rhs(metric, y, "plus")
        g00 = metric.g_inv(y[1:4])[0, 0]
        pminus = y[4] - b_pm(metric, y[1:4], y[5:8], "minus")
        return np.concatenate([dy, [1.0 / (g00 * pminus)]])

    sol = solve_ivp(rhs, (0.0, r_end), np.concatenate([y0, [0.0]]), method="DOP853",
                    rtol=tol, atol=tol, dense_output=True)
    if sol.status == -1:
        raise StepFailure(sol.message, float(sol.t[-1]), sol.y[:8, -1].copy())
    r = np.linspace(0.0, r_end, n_check)
    z = sol.sol(r).T
    s_of_r = z[:, 8]
    full = integrate_flow(metric, y0, "full_p", (min(0.0, s_of_r.min()), max(0.0, s_of_r.max())), tol)
    diff = full(s_of_r) - z[:, :8]
    return float(np.max(np.sqrt(np.sum(diff * diff, axis=-1))))


def scaling_check(metric, w0, branch, lam, s_span, tol=1e-9, n_check=2001):
    """Residual of the homogeneity relation for the half-wave flows."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    y0 = np.asarray(as_state(w0), dtype=float)
    y1 = y0.copy()
    y1[4:8] *= lam
    a = integrate_flow(metric, y0, branch, s_span, tol)
    b = integrate_flow(metric, y1, branch, s_span, tol)
    s = np.linspace(a.s_lo, a.s_hi, n_check)
    ya, yb = a(s), b(s)
    res = (np.abs(ya[:, 0] - yb[:, 0])
           + np.linalg.norm(ya[:, 1:4] - yb[:, 1:4], axis=-1)
           + np.abs(lam * ya[:, 4] - yb[:, 4])
           + np.linalg.norm(lam * ya[:, 5:8] - yb[:, 5:8], axis=-1))
    return float(np.max(res))


def position_acceleration(metric, states, branch, h=1e-20):
    """Second parameter derivative of x along the flow, by complex step.

    x'' = D(dx/ds)[y'] with y' the Hamilton field; exact to rounding.
    """
    y = np.asarray(states, dtype=float)
    dy = hamilton_rhs(metric, y, branch)
    yc = y + 1j * h * dy
    return np.imag(hamilton_rhs(metric, yc, branch)[..., 1:4]) / h, dy[..., 1:4]


def radial_convexity(traj: Trajectory, R0, metric=None):
    """(s, d^2/ds^2 |x_s|^2) at trajectory nodes with |x_s| > R0."""
    if metric is None:
        metric = traj.metric
    y = traj.states
    r = np.linalg.norm(y[:, 1:4], axis=-1)
    keep = r > R0
    if not np.any(keep):
        return []
    acc, vel = position_acceleration(metric, y[keep], traj.branch)
    vals = 2.0 * np.sum(vel * vel, axis=-1) + 2.0 * np.sum(y[keep, 1:4] * acc, axis=-1)
    return list(zip(traj.s[keep].tolist(), vals.tolist()))
