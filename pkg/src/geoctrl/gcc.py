"""Time-dependent geometric control: damping averages along rays, the
first-control time, and the kappa rescaling of (metric, damping)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import NoControl, SpanTooShort
from .flow import integrate_flow
from .halfwave import as_state

_GL_LO = np.polynomial.legendre.leggauss(10)
_GL_HI = np.polynomial.legendre.leggauss(20)


def _panel_rule(f, a, b, rule):
    nodes, weights = rule
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    s = mid[:, None] + half[:, None] * nodes[None, :]
    return half * (f(s.reshape(-1)).reshape(s.shape) @ weights)


def path_integral(f, lo, hi, tol=1e-10, panel=0.25, max_panels=200_000):
    """Composite adaptive Gauss-Legendre integral of a vectorized f over [lo, hi].

    Each panel compares a 10- and a 20-point rule; panels whose difference
    exceeds their share of tol are bisected.
    """
    if hi == lo:
        return 0.0
    sign = 1.0
    if hi < lo:
        lo, hi, sign = hi, lo, -1.0
    n = max(1, int(np.ceil((hi - lo) / panel)))
    edges = np.linspace(lo, hi, n + 1)
    a, b = edges[:-1], edges[1:]
    total = 0.0
    while a.size:
        coarse = _panel_rule(f, a, b, _GL_LO)
        fine = _panel_rule(f, a, b, _GL_HI)
        ok = np.abs(fine - coarse) <= tol * (b - a) / (hi - lo)
        total += float(np.sum(fine[ok]))
        a, b = a[~ok], b[~ok]
        if a.size > max_panels:
            raise RuntimeError("path integral failed to converge")
        if a.size:
            m = 0.5 * (a + b)
            a, b = np.concatenate([a, m]), np.concatenate([m, b])
    return sign * total


def damping_along(traj, damping):
    """Vectorized s -> a(t_s, x_s) along a trajectory."""
    def f(s):
        y = traj(s)
        return damping.a(y[..., 0], y[..., 1:4])
    return f


def damping_average(traj, damping, T, side="two_sided", tol=1e-10):
    """Mean of a along the trajectory over [-T, T], [0, T] or [-T, 0]."""
    if T <= 0:
        raise ValueError("T must be positive")
    lo, hi = {"two_sided": (-T, T), "forward": (0.0, T), "backward": (-T, 0.0)}[side]
    if lo < traj.s_lo - 1e-12 or hi > traj.s_hi + 1e-12:
        raise SpanTooShort(f"trajectory covers [{traj.s_lo}, {traj.s_hi}], need [{lo}, {hi}]")
    return path_integral(damping_along(traj, damping), lo, hi, tol) / (hi - lo)


@dataclass
class GccReport:
    averages: dict
    Cbar_est: float
    T_used: float
    threshold: float
    passed: bool
    n_samples: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "averages": {f"{k[0]}@shift={k[1]}": v for k, v in self.averages.items()},
            "Cbar_est": self.Cbar_est if np.isfinite(self.Cbar_est) else "inf",
            "T_used": self.T_used,
            "threshold": self.threshold,
            "passed": bool(self.passed),
            "n_samples": self.n_samples,
            **self.extra,
        }


def shifted(w, dt):
    y = np.array(as_state(w), dtype=float, copy=True)
    y[0] += dt
    return y


def tgcc_check(metric, damping, trapped_samples, T, threshold, branch="plus",
               time_shifts=(0.0,), tol=1e-9):
    """Two-sided damping averages over [-T, T] for each trapped sample and
    each time translate; passes when their infimum reaches the threshold.

    An empty sample list passes vacuously with infimum +inf.
    """
    averages = {}
    for i, w in enumerate(trapped_samples):
        for dt in time_shifts:
            traj = integrate_flow(metric, shifted(w, dt), branch, (-T, T), tol)
            averages[(i, float(dt))] = damping_average(traj, damping, T, "two_sided")
    cbar = min(averages.values()) if averages else np.inf
    return GccReport(averages, float(cbar), float(T), float(threshold), bool(cbar >= threshold),
                     len(trapped_samples))


def first_control_time(traj, damping, Cbar2, side="forward", grid_step=0.005):
    """Smallest T > 0 with (1/T) int_0^T a(gamma(s)) ds = Cbar2.

    For side="backward" the ray is run in -s. Returns (T, a(gamma(+-T))).
    """
    sgn = 1.0 if side == "forward" else -1.0
    span = traj.s_hi if sgn > 0 else -traj.s_lo
    f = damping_along(traj, damping)
    g = lambda s: f(sgn * np.asarray(s))
    n = max(2, int(np.ceil(span / grid_step)))
    edges = np.linspace(0.0, span, n + 1)
    nodes, weights = _GL_LO
    mid, half = 0.5 * (edges[:-1] + edges[1:]), 0.5 * np.diff(edges)
    pts = mid[:, None] + half[:, None] * nodes[None, :]
    cell = half * (g(pts.reshape(-1)).reshape(pts.shape) @ weights)
    excess = np.concatenate([[0.0], np.cumsum(cell)]) - Cbar2 * edges
    hit = np.nonzero(excess[1:] >= 0.0)[0]
    if hit.size == 0:
        raise NoControl(f"running average stays below {Cbar2} on [0, {span}]")
    k = int(hit[0])
    left = edges[k]
    base = excess[k]

    def F(T):
        return base + path_integral(g, left, T, 1e-13) - Cbar2 * (T - left)

    if F(edges[k + 1]) == 0.0:
        T = float(edges[k + 1])
    elif base == 0.0 and k == 0:
        T = float(brentq(F, left + 1e-15, edges[k + 1], xtol=1e-13))
    else:
        T = float(brentq(F, left, edges[k + 1], xtol=1e-13))
    return T, float(g(np.array([T]))[0])


def kappa_rescale(damping, metric, kappa):
    """(a(kappa t, kappa x), g(kappa x))."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    return damping.rescaled(kappa), metric.rescaled(kappa)


def rescale_flow_residual(metric, kappa, w0, branch, s_span, tol=1e-9, n_check=1001):
    """Max deviation in the flow identity relating the metric and its kappa-rescale.

    Full flow: phi_s(kappa w) = kappa phi~_s(w). Half-wave flows carry the
    parameter along: phi+-_{kappa s}(kappa w) = kappa phi~+-_s(w).
    """
    y0 = np.asarray(as_state(w0), dtype=float)
    small = metric.rescaled(kappa)
    s_fac = 1.0 if branch == "full_p" else kappa
    big = integrate_flow(metric, kappa * y0, branch, s_fac * s_span, tol)
    sm = integrate_flow(small, y0, branch, s_span, tol)
    s = np.linspace(0.0, s_span, n_check)
    diff = big(s_fac * s) - kappa * sm(s)
    return float(np.max(np.abs(diff)))


def stationary_gcc_equiv(metric, damping, trapped_samples, s_max, threshold=1e-3,
                         branch="plus", level=1e-12, step=0.01):
    """(tgcc_pass, hit_pass) for a time-independent damping.

    hit_pass: every trapped ray meets {a > level} for some s in [0, s_max].
    """
    if not damping.stationary:
        raise ValueError("damping must be time independent")
    if not trapped_samples:
        return True, True
    report = tgcc_check(metric, damping, trapped_samples, s_max, threshold, branch)
    hits = []
    s = np.arange(0.0, s_max + step, step)
    s = s[s <= s_max]
    for w in trapped_samples:
        traj = integrate_flow(metric, w, branch, s_max)
        hits.append(bool(np.any(damping_along(traj, damping)(s) > level)))
    return report.passed, all(hits)
