"""Forward/backward trapping verdicts and samples of the trapped set.

An "escaping" verdict carries a certificate: the parameter at which the ray
reached max(R, |x_0|) with R beyond the region where the metric differs
appreciably from the flat one; past that radius rays leave every ball. A
"trapped" verdict only says that did not happen within the horizon.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import EmptyTrappedSet, StepFailure
from .flow import hamilton_rhs, rk4_batch
from .geometry import photon_sphere_radii
from .halfwave import PhasePoint, as_state, phi_rescale, project_states


@dataclass(frozen=True)
class TrapClass:
    forward: str
    backward: str
    horizon_used: float
    escape_radius: float
    forward_exit: float | None = None
    backward_exit: float | None = None

    @property
    def trapped(self):
        return self.forward == "trapped" and self.backward == "trapped"


def _exit_time(metric, y0, branch, radius, s_end, tol):
    """First s in (0, |s_end|] (signed like s_end) with |x_s| >= radius, or None."""
    r0sq = float(np.sum(y0[1:4] ** 2))
    dy = hamilton_rhs(metric, y0, branch)
    outward = np.sign(s_end) * float(np.dot(y0[1:4], dy[1:4]))
    if r0sq >= radius ** 2 and outward > 0:
        return 0.0

    def event(s, y):
        return y[1] * y[1] + y[2] * y[2] + y[3] * y[3] - radius * radius

    event.terminal = True
    event.direction = 1
    sol = solve_ivp(lambda s, y: hamilton_rhs(metric, y, branch), (0.0, s_end), y0,
                    method="DOP853", rtol=tol, atol=tol, events=event)
    if sol.status == -1:
        raise StepFailure(sol.message, float(sol.t[-1]), sol.y[:, -1].copy())
    hits = [s for s in sol.t_events[0] if abs(s) > 0.0]
    return float(hits[0]) if hits else None


def classify(metric, w0, branch="plus", R=None, s_max=1000.0, tol=1e-9):
    """Classify w0 as forward/backward trapped or escaping within the horizon."""
    if R is None:
        R = 2.0 * metric.R0
    if R <= metric.R0:
        raise ValueError("escape radius must exceed R0")
    y0 = np.asarray(as_state(w0), dtype=float)
    radius = max(R, float(np.linalg.norm(y0[1:4])))
    fwd = _exit_time(metric, y0, branch, radius, s_max, tol)
    bwd = _exit_time(metric, y0, branch, radius, -s_max, tol)
    return TrapClass("trapped" if fwd is None else "escaping",
                     "trapped" if bwd is None else "escaping",
                     float(s_max), float(radius), fwd, bwd)


def classify_batch(metric, states, branch="plus", R=None, s_max=1000.0, step=0.05):
    """Vectorized fixed-step version of classify.

    Returns (forward_escaped, backward_escaped) boolean arrays.
    """
    if R is None:
        R = 2.0 * metric.R0
    y0 = np.atleast_2d(np.asarray(states, dtype=float))
    radius2 = np.maximum(R, np.linalg.norm(y0[:, 1:4], axis=-1)) ** 2
    n = int(np.ceil(s_max / step))
    verdicts = []
    for sign in (1.0, -1.0):
        escaped = np.zeros(len(y0), dtype=bool)
        prev = np.sum(y0[:, 1:4] ** 2, axis=-1)
        alive = np.arange(len(y0))
        y = y0.copy()
        h = sign * s_max / n
        for _ in range(n):
            if alive.size == 0:
                break
            y = rk4_batch(lambda z: hamilton_rhs(metric, z, branch), y, h, 1)
            cur = np.sum(y[:, 1:4] ** 2, axis=-1)
            hit = (cur >= radius2[alive]) & (cur > prev)
            escaped[alive[hit]] = True
            keep = ~hit
            alive, y, prev = alive[keep], y[keep], cur[keep]
        verdicts.append(escaped)
    return verdicts[0], verdicts[1]


def sample_trapped_set(metric, n, s_max=1000.0, branch="plus", seed=0, shell=0.1,
                       max_rounds=20, step=0.1):
    """Phi-normalized phase points (tau = 1) trapped in both directions.

    Seeds are drawn in a thin shell around the innermost circular-orbit
    radius with momenta near the tangential direction; on metrics without
    circular null orbits the trapped set is reported empty.
    """
    if n <= 0:
        return []
    if not metric.isotropic:
        raise ValueError("trapped-set sampling needs a spherically symmetric metric")
    roots = photon_sphere_radii(metric)
    if not roots:
        raise EmptyTrappedSet("no circular null orbit: the trapped set is empty")
    r_star = roots[0]
    rng = np.random.default_rng(seed)
    found = []
    for _ in range(max_rounds):
        m = 2 * n
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        r = r_star + rng.uniform(-shell, shell, size=m)
        x = r[:, None] * d
        tang = rng.normal(size=(m, 3))
        tang -= np.sum(tang * d, axis=-1, keepdims=True) * d
        tang /= np.linalg.norm(tang, axis=-1, keepdims=True)
        tilt = rng.uniform(-0.15, 0.15, size=m)
        xi = tang + tilt[:, None] * d
        states = np.zeros((m, 8))
        states[:, 1:4] = x
        states[:, 5:8] = xi
        states = phi_rescale(metric, project_states(metric, states, branch), branch)
        fwd, bwd = classify_batch(metric, states, branch, s_max=s_max, step=step)
        found.extend(states[~fwd & ~bwd])
        if len(found) >= n:
            break
    if not found:
        raise EmptyTrappedSet("no trapped seeds found")
    return [PhasePoint.from_array(s) for s in found[:n]]


def save_samples_csv(path, samples):
    np.savetxt(path, np.asarray([as_state(s) for s in samples]).reshape(-1, 8), delimiter=",",
               header="t,x1,x2,x3,tau,xi1,xi2,xi3", comments="", fmt="%.17g")


def load_samples_csv(path):
    return list(np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1)))
