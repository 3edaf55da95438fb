"""Escape functions: local trapped-region triples, non-trapping pieces, the
combined symbol with its elliptic correction, and pointwise verification.

Conventions
-----------
* Trapped-region data live on the plus branch at normalized points
  (tau = 1, b+(x, zeta) = 1). Minus-branch data are obtained by the
  momentum reflection xi -> -xi, which maps minus-flow lines onto plus-flow
  lines because b-(x, xi) = -b+(x, -xi). Concretely the minus-branch phase
  function at (t, x, xi) is the plus-branch one at (t, x, xi / b-(x, xi)).
* Periodic or stationary damping only: triples are shared between time
  translates by multiples of the period (1 for stationary damping).
* The non-trapping inflow piece needs a spherically symmetric metric, since
  the trapped region is recognized through the conserved angular momentum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.optimize import brentq

from .errors import ChartFailure, InequalityViolated, NoExit, NoRadius, SingularCorrection
from .flow import hamilton_rhs, integrate_flow, rk4_batch, rk4_flow
from .gcc import first_control_time, path_integral
from .geometry import (AnnulusDecomposition, SmoothCutoff, ZeroDamping, bracket, cj_sequence,
                       photon_sphere_radii, smooth_step)
from .halfwave import as_state, b_and_grads, b_pm


def _period(damping):
    p = damping.time_period()
    return 1.0 if p is None else float(p)


def normalize_momentum(metric, x, zeta, branch="plus"):
    """Scale zeta so that |b_branch(x, zeta)| = 1."""
    b = np.abs(b_pm(metric, x, zeta, branch))
    return zeta / np.asarray(b)[..., None]


def _ball_points(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d * (radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0))


def chart_domain_points(metric, base, radius, n, rng, branch="plus"):
    """Random (z, zeta) with |z - base_x| < radius, |zeta - base_zeta| < radius,
    zeta normalized."""
    base = np.asarray(as_state(base), dtype=float)
    zs, zetas = [], []
    got = 0
    while got < n:
        m = 2 * (n - got) + 8
        z = base[1:4] + _ball_points(rng, m, radius)
        zeta = normalize_momentum(metric, z, base[5:8] + _ball_points(rng, m, radius), branch)
        ok = np.linalg.norm(zeta - base[5:8], axis=-1) < radius
        zs.append(z[ok])
        zetas.append(zeta[ok])
        got += int(ok.sum())
    return np.concatenate(zs)[:n], np.concatenate(zetas)[:n]


def _states(t, z, zeta):
    t = np.broadcast_to(np.asarray(t, dtype=float), z.shape[:-1])
    out = np.zeros(z.shape[:-1] + (8,))
    out[..., 0] = t
    out[..., 1:4] = z
    out[..., 4] = 1.0
    out[..., 5:8] = zeta
    return out


# ---------------------------------------------------------------------------
# product charts and the oscillation radius
# ---------------------------------------------------------------------------

@dataclass
class ProductChart:
    """(s, z, zeta) -> phi_s(t_0, z, 1, zeta) near a normalized base point."""
    metric: object
    base: np.ndarray
    branch: str
    r0: float
    span: tuple
    step: float = 0.01
    nodes: np.ndarray | None = None

    def forward(self, s, z, zeta):
        y = _states(self.base[0], z, zeta)
        return rk4_flow(self.metric, y, self.branch, s, self.step)

    def inverse(self, states):
        states = np.asarray(states, dtype=float)
        s = states[..., 0] - self.base[0]
        back = rk4_flow(self.metric, states, self.branch, -s, self.step)
        return s, back[..., 1:4], back[..., 5:8]

    def round_trip_error(self, s=None):
        if self.nodes is None or len(self.nodes) == 0:
            return 0.0
        if s is None:
            s = np.linspace(self.span[0], self.span[1], len(self.nodes))
        img = self.forward(s, self.nodes[:, 1:4], self.nodes[:, 5:8])
        s2, z2, zeta2 = self.inverse(img)
        err = np.abs(s2 - s) + np.linalg.norm(z2 - self.nodes[:, 1:4], axis=-1) \
            + np.linalg.norm(zeta2 - self.nodes[:, 5:8], axis=-1)
        return float(np.max(err))


def product_coords(metric, omega, branch, span, r0, n_nodes=200, seed=0, step=0.01):
    """Product chart around omega with a round-trip invertibility check."""
    base = np.asarray(as_state(omega), dtype=float)
    rng = np.random.default_rng(seed)
    z, zeta = chart_domain_points(metric, base, 2.0 * r0, n_nodes, rng, branch)
    chart = ProductChart(metric, base, branch, float(r0), tuple(span), step, _states(base[0], z, zeta))
    err = chart.round_trip_error()
    if not err <= 1e-6:
        raise ChartFailure(f"chart round-trip error {err:.3e} exceeds 1e-6")
    return chart


def _sweep(metric, y0, branch, s_lo, s_hi, ds):
    """States on a uniform s-grid covering [s_lo, s_hi] (0 included)."""
    n_hi = int(math.ceil(s_hi / ds)) if s_hi > 0 else 0
    n_lo = int(math.ceil(-s_lo / ds)) if s_lo < 0 else 0
    rhs = lambda y: hamilton_rhs(metric, y, branch)
    fwd, bwd = [], []
    rk4_batch(rhs, y0, ds, n_hi, callback=lambda i, y: fwd.append(y) and False)
    rk4_batch(rhs, y0, -ds, n_lo, callback=lambda i, y: bwd.append(y) and False)
    s = np.arange(-n_lo, n_hi + 1) * ds
    return s, np.stack(bwd[::-1] + [np.asarray(y0, dtype=float)] + fwd)


def control_times(metric, damping, samples, Cbar2, branch="plus", span=60.0):
    """T_omega for every sample in the small-damping case, None otherwise."""
    out = []
    for w in samples:
        y = np.asarray(as_state(w), dtype=float)
        if damping.a(y[0], y[1:4]) > 0.5 * Cbar2:
            out.append(None)
            continue
        traj = integrate_flow(metric, y, branch, (-3.0, span))
        out.append(first_control_time(traj, damping, Cbar2, "forward")[0])
    return out


def damping_oscillation(metric, damping, samples, eta, span, n_lattice=64, ds=0.02, seed=0,
                        branch="plus"):
    """Max over samples, lattice perturbations of size eta, and s in span of
    |a(phi_s(perturbed)) - a(phi_s(omega))|."""
    rng = np.random.default_rng(seed)
    rows = []
    for w in samples:
        base = np.asarray(as_state(w), dtype=float)
        z, zeta = chart_domain_points(metric, base, eta, n_lattice, rng, branch)
        rows.append(base[None, :])
        rows.append(_states(base[0], z, zeta))
    y0 = np.concatenate(rows)
    _, ys = _sweep(metric, y0, branch, span[0], span[1], ds)
    a = damping.a(ys[..., 0], ys[..., 1:4])                 # [n_s, rows]
    worst = 0.0
    k = 0
    for _ in samples:
        block = a[:, k:k + n_lattice + 1]
        worst = max(worst, float(np.max(np.abs(block[:, 1:] - block[:, :1]))))
        k += n_lattice + 1
    return worst


def r0_search(metric, damping, trapped_samples, Cbar2, span=None, n_lattice=64, ds=0.02,
              eta_min=2.0 ** -14, n_bisect=6, seed=0, branch="plus"):
    """Half of the largest tested eta in (0, 1] keeping the damping oscillation
    over eta-perturbations below Cbar2 / 4."""
    if not trapped_samples:
        raise ValueError("need at least one sample")
    if span is None:
        Ts = [T for T in control_times(metric, damping, trapped_samples, Cbar2, branch) if T is not None]
        span = (-2.0, (max(Ts) if Ts else 0.0) + 2.0)
    limit = 0.25 * Cbar2

    def ok(eta):
        return damping_oscillation(metric, damping, trapped_samples, eta, span, n_lattice, ds,
                                   seed, branch) <= limit

    hi = 1.0
    if ok(hi):
        return 0.5
    lo = 0.5
    while not ok(lo):
        hi = lo
        lo *= 0.5
        if lo < eta_min:
            raise NoRadius(f"oscillation bound fails even at eta = {lo:.3e}")
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * lo


# ---------------------------------------------------------------------------
# local triples
# ---------------------------------------------------------------------------

def _weight(a, Cbar2):
    """a * S((a - Cbar2/2) / (Cbar2/4)): zero below Cbar2/2, equal to a above 3 Cbar2/4."""
    return a * smooth_step((a - 0.5 * Cbar2) / (0.25 * Cbar2))


@dataclass
class LocalEscapeTriple:
    base: np.ndarray
    branch: str
    kind: str                  # "small" or "large" damping at the base point
    Cbar2: float
    r0: float
    eps: float
    eps1: float
    T_omega: float
    Cstar: float
    chart: ProductChart
    gamma: object              # Trajectory through the base point
    damping: object
    _I: object = None          # spline of int_0^s a(gamma)
    _k: float = 0.0
    _d: float = 0.0
    _m: float = 2.0
    _beta: float = 0.0

    # --- profile in s ------------------------------------------------------
    @property
    def support(self):
        if self.kind == "large":
            return (-2.0 * self.eps1, 2.0 * self.eps1)
        return (-1.0, self.T_omega + 2.0 * self.eps)

    @property
    def r1(self):
        return self.r0

    @property
    def C1(self):
        return 4.0 * (1.0 + self.Cstar / self.Cbar2)

    def a_gamma(self, s):
        s = np.asarray(s, dtype=float)
        y = self.gamma(s)
        return self.damping.a(y[..., 0], y[..., 1:4])

    def alpha(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        if self.kind == "large":
            return out
        e2, T, e = self.eps ** 2, self.T_omega, self.eps
        left = (s >= -1.0) & (s < 0.0)
        out[left] = e2 * (1.0 + s[left]) ** (self._k + 1.0)
        mid = (s >= 0.0) & (s <= T)
        out[mid] = self.Cbar2 * s[mid] - self._I(s[mid]) + e2
        right = (s > T) & (s < T + e)
        u = (s[right] - T) / e
        out[right] = e2 * (1.0 - u) ** self._m * (1.0 + self._beta * u)
        return out

    def alpha_d(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        if self.kind == "large":
            return out
        T, e = self.T_omega, self.eps
        left = (s >= -1.0) & (s < 0.0)
        out[left] = self._d * (1.0 + s[left]) ** self._k
        mid = (s >= 0.0) & (s <= T)
        if np.any(mid):
            out[mid] = self.Cbar2 - self.a_gamma(s[mid])
        right = (s > T) & (s < T + e)
        u = (s[right] - T) / e
        m, b = self._m, self._beta
        out[right] = e * (1.0 - u) ** (m - 1.0) * (b - m - b * (m + 1.0) * u)
        return out

    def rho(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "large":
            return SmoothCutoff("interval", lo=-self.eps1, hi=self.eps1, width=self.eps1)(s)
        h = 0.5 * self.eps1
        up = smooth_step((s + h) / h)
        down = 1.0 - smooth_step((s - self.T_omega - self.eps) / self.eps)
        return up * down

    def mu(self, s):
        h = 0.5 * self.eps1
        return SmoothCutoff("interval", lo=-h, hi=h, width=h)(np.asarray(s, dtype=float))

    def cutoffs(self, z, zeta):
        c = SmoothCutoff("lt", R=self.r0)
        return (c(np.linalg.norm(z - self.base[1:4], axis=-1))
                * c(np.linalg.norm(zeta - self.base[5:8], axis=-1)))

    # --- symbols in chart coordinates --------------------------------------
    def evaluate(self, s, z, zeta, a_point=None):
        """q, H q (= d/ds q), the damping-controlled term and the remainder."""
        s = np.asarray(s, dtype=float)
        pc = self.cutoffs(z, zeta)
        r = 0.25 * self.Cbar2 * self.mu(s) * pc
        if self.kind == "large":
            if a_point is None:
                raise ValueError("large-damping triples need the damping at the point")
            zero = np.zeros_like(s)
            return {"q": zero, "Hq": zero, "A": a_point * self.rho(s) * pc, "r": r}
        live = (s > self.support[0]) & (s < self.support[1])
        A = np.zeros_like(s)
        if np.any(live):
            A[live] = (2.0 * (1.0 + self.Cstar / self.Cbar2)
                       * _weight(self.a_gamma(s[live]), self.Cbar2) * self.rho(s[live]))
        return {"q": self.alpha(s) * pc, "Hq": self.alpha_d(s) * pc, "A": A * pc, "r": r}


def build_local_triple(metric, damping, omega, branch, constants, gamma_span=(-3.0, 60.0)):
    """Local escape triple at a normalized trapped sample.

    constants: dict with Cbar2 and r0; eps, eps1 may be supplied to
    override the searched values.
    """
    Cbar2, r0 = float(constants["Cbar2"]), float(constants["r0"])
    base = np.asarray(as_state(omega), dtype=float)
    gamma = integrate_flow(metric, base, branch, gamma_span)
    a0 = float(damping.a(base[0], base[1:4]))
    chart = ProductChart(metric, base, branch, r0, (-2.0, 2.0))

    def a_on(s):
        y = gamma(s)
        return damping.a(y[..., 0], y[..., 1:4])

    if a0 > 0.5 * Cbar2:
        target = 0.5 * (a0 + 0.5 * Cbar2)
        grid = np.linspace(0.0, 0.5, 501)
        bad = (a_on(grid) < target) | (a_on(-grid) < target)
        e1 = grid[np.argmax(bad)] if np.any(bad) else 0.5
        eps1 = float(constants.get("eps1", 0.9 * e1))
        chart.span = (-2.0 * eps1, 2.0 * eps1)
        return LocalEscapeTriple(base, branch, "large", Cbar2, r0, 0.0, eps1, 0.0, 0.0, chart, gamma, damping)

    T, _ = first_control_time(gamma, damping, Cbar2, "forward")
    d = Cbar2 - a0

    # int_0^s a(gamma) on [0, T] as a Hermite spline with exact derivative
    n = max(400, int(math.ceil(T / 0.002)))
    sg = np.linspace(0.0, T, n + 1)
    nodes, weights = np.polynomial.legendre.leggauss(10)
    mid, half = 0.5 * (sg[:-1] + sg[1:]), 0.5 * np.diff(sg)
    pts = mid[:, None] + half[:, None] * nodes[None, :]
    cell = half * (a_on(pts.reshape(-1)).reshape(pts.shape) @ weights)
    I = CubicHermiteSpline(sg, np.concatenate([[0.0], np.cumsum(cell)]), a_on(sg))
    d0 = Cbar2 - float(a_on(np.array([T]))[0])

    # right blend width: a(gamma) large enough that the damping term dominates
    eps = float(constants.get("eps", math.sqrt(Cbar2 / 8.0)))
    for _ in range(60):
        m = max(2.0, float(math.ceil(abs(d0) / eps)))
        beta = m + d0 / eps
        u = np.linspace(0.0, 1.0, 801)
        fprime = (1.0 - u) ** (m - 1.0) * (beta - m - beta * (m + 1.0) * u)
        cstar = max(0.0, float(-np.min(eps * fprime)))
        need = max(0.75 * Cbar2, Cbar2 * cstar / (Cbar2 + cstar))
        if np.all(a_on(T + eps * u) >= need) or "eps" in constants:
            break
        eps *= 0.5
    else:
        raise NoRadius("no admissible blend width after the control time")

    k = d / eps ** 2 - 1.0
    cond1 = 1.0 - (Cbar2 / (4.0 * d)) ** (1.0 / k)
    grid = np.linspace(0.0, T, 2001)
    above = a_on(grid) > 0.75 * Cbar2
    cond2 = grid[np.argmax(above)] if np.any(above) else T
    eps1 = float(constants.get("eps1", 0.9 * min(cond1, cond2, 0.5)))
    chart.span = (-1.0, T + 2.0 * eps)
    return LocalEscapeTriple(base, branch, "small", Cbar2, r0, eps, eps1, T, cstar, chart, gamma,
                             damping, I, k, d, m, beta)


def sample_triple(triple, n, rng):
    """Random chart coordinates over the triple's support."""
    lo, hi = triple.support
    s = rng.uniform(lo, hi, size=n)
    z, zeta = chart_domain_points(triple.chart.metric, triple.base, 2.0 * triple.r0, n, rng, triple.branch)
    return s, z, zeta


def local_check(triple, metric, damping, n_samples=10_000, seed=0):
    """(min of Hq + A - r, max of A - C1 a, witness) over random chart points."""
    rng = np.random.default_rng(seed)
    s, z, zeta = sample_triple(triple, n_samples, rng)
    pts = triple.chart.forward(s, z, zeta)
    a_pt = damping.a(pts[:, 0], pts[:, 1:4])
    ev = triple.evaluate(s, z, zeta, a_pt)
    res = ev["Hq"] + ev["A"] - ev["r"]
    i = int(np.argmin(res))
    witness = {"s": float(s[i]), "z": z[i].tolist(), "zeta": zeta[i].tolist()}
    return float(res[i]), float(np.max(ev["A"] - triple.C1 * a_pt)), witness


def verify_local_inequality(triple, metric, damping, n_samples=10_000, seed=0):
    """Min over chart samples of Hq + A - r; raises below -1e-6."""
    res, _, witness = local_check(triple, metric, damping, n_samples, seed)
    if res < -1e-6:
        raise InequalityViolated("local escape inequality fails", witness, res)
    return res


# ---------------------------------------------------------------------------
# non-trapping pieces
# ---------------------------------------------------------------------------

@dataclass
class TrapIndicator:
    """Smooth indicator in (|x|, angular momentum / b) of a dilated trapped region."""
    r_band: SmoothCutoff | None
    l_band: SmoothCutoff | None
    l_range: tuple = (np.inf, -np.inf)
    r_split: float = 0.0

    @property
    def empty(self):
        return self.r_band is None

    def invariants(self, metric, x, zeta):
        r = np.linalg.norm(x, axis=-1)
        ell = np.linalg.norm(np.cross(x, zeta), axis=-1) / np.abs(b_pm(metric, x, zeta, "plus"))
        return r, ell

    def __call__(self, metric, x, zeta):
        if self.empty:
            return np.zeros(np.shape(x)[:-1])
        r, ell = self.invariants(metric, x, zeta)
        return self.r_band(r) * self.l_band(ell)

    def parked(self, metric, x, zeta):
        """Rows on a trapped orbit that stays inside the plateau forever."""
        if self.empty:
            return np.zeros(np.shape(x)[:-1], dtype=bool)
        r, ell = self.invariants(metric, x, zeta)
        return (ell > self.l_range[0]) & (ell < self.l_range[1]) & (r < self.r_split)


def build_trap_indicator(metric, damping=None, dilate=0.05, width=0.1):
    """Indicator of the trapped set of a spherically symmetric metric.

    With n(r) = r / c(r), a unit-speed ray has conserved ell = |x x zeta| / b
    and stays where n(r) >= ell. Rays are trapped exactly when ell lies
    strictly between the barrier value n(r_out) and the well value n(r_in),
    and the ray sits inside the outer circular orbit r_out.
    """
    if not metric.isotropic:
        raise ValueError("the trap indicator needs a spherically symmetric metric")
    roots = photon_sphere_radii(metric)
    n = lambda r: r / metric.speed(r)
    if len(roots) < 2:
        return TrapIndicator(None, None)
    r_in, r_out = roots[0], roots[1]
    l_hi, l_lo = float(n(r_in)), float(n(r_out))
    if not l_hi > l_lo:
        return TrapIndicator(None, None)
    r_min = brentq(lambda r: n(r) - l_lo, 1e-9, r_in)
    r_band = SmoothCutoff("interval", lo=r_min - dilate, hi=r_out + dilate, width=width)
    l_band = SmoothCutoff("interval", lo=l_lo - dilate, hi=l_hi + dilate, width=width)
    ind = TrapIndicator(r_band, l_band, (l_lo, l_hi), float(r_out))
    if damping is not None:
        _check_inside_damping(ind, damping)
    return ind


def _check_inside_damping(ind, damping, n_dir=64, n_r=60, n_t=8):
    lo = ind.r_band.lo - ind.r_band.width
    hi = ind.r_band.hi + ind.r_band.width
    k = np.arange(n_dir) + 0.5
    z = 1.0 - 2.0 * k / n_dir
    ph = math.pi * (1.0 + 5 ** 0.5) * k
    d = np.stack([np.sqrt(1 - z * z) * np.cos(ph), np.sqrt(1 - z * z) * np.sin(ph), z], axis=-1)
    r = np.linspace(lo, hi, n_r)
    x = (r[:, None, None] * d[None, :, :]).reshape(-1, 3)
    P = _period(damping)
    for t in (np.arange(n_t) + 0.5) * P / n_t:
        if np.any(damping.a(t, x) <= 0.0):
            raise ValueError("the trap indicator support leaves the region where a > 0")


@dataclass
class NonTrapping:
    metric: object
    sigma: float
    R: float
    R0: float
    delta: float
    c_seq: np.ndarray
    theta: TrapIndicator
    horizon: float = 80.0
    step: float = 0.05
    _F: object = None
    _h: object = None
    _rmax: float = 0.0

    # --- radial weight f = exp(sigma int_{R0}^r h) --------------------------
    def h(self, r):
        j = np.log2(bracket(np.asarray(r, dtype=float)[..., None]))
        return 2.0 ** self.delta * np.exp(self._h(j))

    def f(self, r):
        rc = np.clip(np.asarray(r, dtype=float), self.R0, self._rmax)
        return np.exp(self.sigma * self._F(rc))

    def f_d(self, r):
        r = np.asarray(r, dtype=float)
        inside = (r >= self.R0) & (r <= self._rmax)
        return np.where(inside, self.sigma * self.h(r) * self.f(r), 0.0)

    def cj_at(self, r):
        """c_j 2^-j for the annulus index j nearest log2 <r>."""
        j = np.clip(np.rint(np.log2(bracket(np.asarray(r, dtype=float)[..., None]))).astype(int),
                    0, len(self.c_seq) - 1)
        return self.c_seq[j] * 2.0 ** (-j.astype(float))

    # --- pieces -------------------------------------------------------------
    def psi(self, x, zeta):
        r = np.linalg.norm(x, axis=-1)
        return SmoothCutoff("lt", R=self.R)(r) * (1.0 - self.theta(self.metric, x, zeta))

    def q_out(self, x, zeta, branch="plus"):
        r = np.linalg.norm(x, axis=-1)
        _, _, bxi = b_and_grads(self.metric, x, zeta, branch)
        radial = np.sum(bxi * x, axis=-1) / np.where(r > 0, r, 1.0)
        return -SmoothCutoff("gt", R=self.R)(r) * self.f(r) * radial

    def psi_integral(self, x, zeta, branch="plus"):
        """int_0^inf psi along the flow, integrated until the ray leaves the
        support of psi for good or parks on a trapped orbit inside the
        plateau of the trap indicator."""
        x = np.asarray(x, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        n = len(x)
        total = np.zeros(n)
        y = _states(0.0, x, zeta)
        alive = np.nonzero(~self.theta.parked(self.metric, x, zeta))[0]
        y = y[alive]
        h = self.step
        rhs = lambda v: hamilton_rhs(self.metric, v, branch)
        acc = np.zeros(len(alive))
        for _ in range(int(math.ceil(self.horizon / h))):
            if alive.size == 0:
                break
            k1 = rhs(y)
            y2 = y + 0.5 * h * k1
            k2 = rhs(y2)
            y3 = y + 0.5 * h * k2
            k3 = rhs(y3)
            y4 = y + h * k3
            k4 = rhs(y4)
            p1 = self.psi(y[:, 1:4], y[:, 5:8])
            p2 = self.psi(y2[:, 1:4], y2[:, 5:8])
            p3 = self.psi(y3[:, 1:4], y3[:, 5:8])
            p4 = self.psi(y4[:, 1:4], y4[:, 5:8])
            acc += (h / 6.0) * (p1 + 2.0 * p2 + 2.0 * p3 + p4)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            xr = np.sum(y[:, 1:4] ** 2, axis=-1)
            out = (xr > (2.0 * self.R) ** 2) & (np.sum(y[:, 1:4] * k4[:, 1:4], axis=-1) > 0.0)
            done = out | self.theta.parked(self.metric, y[:, 1:4], y[:, 5:8])
            if np.any(done):
                total[alive[done]] = acc[done]
                keep = ~done
                alive, y, acc = alive[keep], y[keep], acc[keep]
        if alive.size:
            raise NoExit(f"{alive.size} rays still inside the support of psi after s = {self.horizon}")
        return total

    def q_in(self, x, zeta, branch="plus", integral=None):
        """-chi_{<2R} int_0^inf psi along the flow."""
        if integral is None:
            integral = self.psi_integral(x, zeta, branch)
        r = np.linalg.norm(x, axis=-1)
        return -SmoothCutoff("lt", R=2.0 * self.R)(r) * integral

    def q_in_rate(self, x, zeta, integral):
        """Plus-flow derivative of q_in given the psi integral at the point."""
        r = np.linalg.norm(x, axis=-1)
        chi = SmoothCutoff("lt", R=2.0 * self.R)
        _, _, bxi = b_and_grads(self.metric, x, zeta, "plus")
        dr = -np.sum(x * bxi, axis=-1) / np.where(r > 0, r, 1.0)
        return chi(r) * self.psi(x, zeta) - chi.deriv(r, 1) * dr * integral


def build_nontrapping(metric, decomp: AnnulusDecomposition, sigma, R, damping=None, theta=None,
                      horizon=80.0, step=0.05, samples_per_annulus=512):
    """Inflow and outflow pieces of the non-trapping escape function."""
    if R <= metric.R0:
        raise ValueError("R must exceed R0")
    c_seq = cj_sequence(metric, damping if damping is not None else ZeroDamping(), decomp,
                        samples_per_annulus, floor=decomp.c_bound, r_min=metric.R0)
    if theta is None:
        theta = build_trap_indicator(metric, damping)
    J = len(c_seq) - 1
    ext = 30
    j = np.arange(J + 1 + ext, dtype=float)
    cj = np.concatenate([c_seq, c_seq[-1] * 2.0 ** (-decomp.delta * np.arange(1, ext + 1))])
    hspline = PchipInterpolator(j, np.log(cj * 2.0 ** (-j)), extrapolate=True)
    nt = NonTrapping(metric, float(sigma), float(R), float(metric.R0), decomp.delta, c_seq, theta,
                     horizon, step, None, hspline, 2.0 ** (J + 4))
    rg = np.geomspace(metric.R0, nt._rmax, 4001)
    hv = nt.h(rg)
    gl_x, gl_w = np.polynomial.legendre.leggauss(10)
    mid, half = 0.5 * (rg[:-1] + rg[1:]), 0.5 * np.diff(rg)
    cell = half * (nt.h(mid[:, None] + half[:, None] * gl_x[None, :]) @ gl_w)
    cum = np.concatenate([[0.0], np.cumsum(cell)])
    nt._F = CubicHermiteSpline(rg, cum, hv)
    return nt


# ---------------------------------------------------------------------------
# combined escape function and the elliptic correction
# ---------------------------------------------------------------------------

@dataclass
class CombinedEscape:
    metric: object
    damping: object
    triples: list
    nontrap: NonTrapping
    sigma: float
    kappa: float | None
    stencil_h: float = 1e-3
    b_floor: float = 1.0
    EFG: dict = field(default_factory=dict)

    # --- high-frequency cutoffs ----------------------------------------------
    # chi_{>1}(|b|) and chi_{>1}(|tau|) are scaled so that both are identically
    # 1 once |xi| >= 1 and |tau| >= 1; tau is constant along the flow, so its
    # cutoff only multiplies the master expression by 1 on that region.
    def b_cutoff(self, x, xi, sign):
        b = np.abs(b_pm(self.metric, x, xi, "plus" if sign > 0 else "minus"))
        return SmoothCutoff("gt", R=0.5 * self.b_floor)(b)

    @staticmethod
    def tau_cutoff(tau):
        return SmoothCutoff("gt", R=0.5)(np.abs(tau))

    def q_branch_gt1(self, states, sign):
        """exp(-sigma Q) chi_{>1}(|b|) chi_{>1}(|tau|) for one branch."""
        states = np.asarray(states, dtype=float)
        Q, _ = self.phase(self.project(states, sign))
        with np.errstate(over="ignore"):
            e = np.exp(-self.sigma * Q)
        return e * self.b_cutoff(states[:, 1:4], states[:, 5:8], sign) * self.tau_cutoff(states[:, 4])

    def q_plus_gt1(self, states):
        return self.q_branch_gt1(states, 1.0)

    def q_minus_gt1(self, states):
        return self.q_branch_gt1(states, -1.0)

    def q(self, states):
        """p+ q-_{>1} + p- q+_{>1}."""
        states = np.asarray(states, dtype=float)
        x, tau, xi = states[:, 1:4], states[:, 4], states[:, 5:8]
        pp = tau - b_pm(self.metric, x, xi, "plus")
        pm = tau - b_pm(self.metric, x, xi, "minus")
        return pp * self.q_minus_gt1(states) + pm * self.q_plus_gt1(states)

    def m(self, states):
        """Elliptic correction m = -m~ / g^00 summed over both branch pieces,
        as (value, log scale) pairs per branch."""
        res = master_terms(self, states)
        return {s: (res["m"][s], res[s]["L"]) for s in (1.0, -1.0)}

    # --- trapped-region sum ----------------------------------------------------
    def trapped_sum(self, states):
        """(q1, sum of damping-controlled terms) at normalized plus-branch states."""
        states = np.asarray(states, dtype=float)
        n = len(states)
        q1, A = np.zeros(n), np.zeros(n)
        if not self.triples:
            return q1, A
        P = _period(self.damping)
        for tr in self.triples:
            lo, hi = tr.support
            t_rel = states[:, 0] - tr.base[0]
            k_min = np.floor((t_rel - hi) / P).astype(int)
            k_max = np.ceil((t_rel - lo) / P).astype(int)
            for dk in range(int(np.max(k_max - k_min)) + 1 if n else 0):
                k = k_min + dk
                s = t_rel - k * P
                live = (k <= k_max) & (s > lo) & (s < hi)
                if not np.any(live):
                    continue
                idx = np.nonzero(live)[0]
                sl = s[idx]
                # cheap localization: distance to the base curve at parameter s
                g = tr.gamma(sl)
                near = np.linalg.norm(states[idx, 1:4] - g[:, 1:4], axis=-1) < 60.0 * tr.r0 + 0.05
                near &= np.linalg.norm(states[idx, 5:8] - g[:, 5:8], axis=-1) < 60.0 * tr.r0 + 0.05
                if not np.any(near):
                    continue
                idx, sl = idx[near], sl[near]
                back = rk4_flow(self.metric, states[idx], tr.branch, -sl, tr.chart.step)
                a_pt = self.damping.a(states[idx, 0], states[idx, 1:4])
                ev = tr.evaluate(sl, back[:, 1:4], back[:, 5:8], a_pt)
                q1[idx] += ev["q"]
                A[idx] += ev["A"]
        return q1, A

    def phase(self, states, inflow=True):
        """(Q, sum A) at normalized plus-branch states; inflow=False leaves
        out q_in, whose flow derivative is known in closed form."""
        states = np.asarray(states, dtype=float)
        x, zeta = states[:, 1:4], states[:, 5:8]
        Q, A = self.trapped_sum(states)
        Q = Q + self.nontrap.q_out(x, zeta)
        if inflow:
            Q = Q + self.inflow(x, zeta)[0]
        return Q, A

    def inflow(self, x, zeta):
        """(q_in, plus-flow derivative of q_in), deduplicated over rows."""
        key, inv = np.unique(np.concatenate([x, zeta], axis=1), axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        kx, kz = key[:, :3], key[:, 3:]
        integral = self.nontrap.psi_integral(kx, kz)
        return (self.nontrap.q_in(kx, kz, integral=integral)[inv],
                self.nontrap.q_in_rate(kx, kz, integral)[inv])

    def project(self, states, sign):
        """Normalized plus-branch representative of the branch data at each state."""
        states = np.asarray(states, dtype=float)
        b = b_pm(self.metric, states[:, 1:4], states[:, 5:8], "plus" if sign > 0 else "minus")
        out = states.copy()
        out[:, 4] = 1.0
        out[:, 5:8] = states[:, 5:8] / np.asarray(b)[:, None]
        return out

    # --- master expression -------------------------------------------------------
    def pieces(self, states):
        """Branch pieces of H_p q + 2 kappa tau a q at the given states.

        Returns per-branch dicts with the log scale L = -sigma Q, the scaled
        flow derivative D and the scaled damping factor W, so that the
        piece equals exp(L) (D + kappa W).
        """
        states = np.asarray(states, dtype=float)
        n = len(states)
        h = self.stencil_h
        offs = np.array([-2.0, -1.0, 0.0, 1.0, 2.0]) * h
        flowed = np.stack([rk4_batch(lambda y: hamilton_rhs(self.metric, y, "full_p"), states, o, 1)
                           if o != 0.0 else states for o in offs])              # [5, n, 8]
        out = {}
        bplus = b_pm(self.metric, states[:, 1:4], states[:, 5:8], "plus")
        bminus = b_pm(self.metric, states[:, 1:4], states[:, 5:8], "minus")
        a = self.damping.a(states[:, 0], states[:, 1:4])
        for sign in (1.0, -1.0):
            proj = self.project(flowed.reshape(-1, 8), sign)
            Q, A = self.phase(proj, inflow=False)
            Q = Q.reshape(5, n)
            A = A.reshape(5, n)
            other = "minus" if sign > 0 else "plus"
            pf = flowed[..., 4] - b_pm(self.metric, flowed[..., 1:4], flowed[..., 5:8], other)
            cut = self.b_cutoff(flowed[..., 1:4], flowed[..., 5:8], sign)
            g = pf * cut * np.exp(-self.sigma * (Q - Q[2]))
            D = (g[0] - 8.0 * g[1] + 8.0 * g[3] - g[4]) / (12.0 * h)
            # q_in: the full flow moves the normalized point along the plus
            # flow line with speed -2 b_own (spherically symmetric metrics)
            centre = proj.reshape(5, n, 8)[2]
            q_in, rate = self.inflow(centre[:, 1:4], centre[:, 5:8])
            b_own = bplus if sign > 0 else bminus
            D = D - self.sigma * pf[2] * cut[2] * (-2.0 * b_own) * rate
            W = 2.0 * states[:, 4] * a * pf[2] * cut[2]
            out[sign] = {"L": -self.sigma * (Q[2] + q_in), "D": D, "W": W, "A": A, "a": a,
                         "proj": proj.reshape(5, n, 8)}
        out["bplus"], out["bminus"], out["a"] = bplus, bminus, a
        return out


def combine_and_correct(metric, damping, triples, nontrap, sigma, kappa=None, stencil_h=1e-3):
    if not metric.isotropic:
        raise ValueError("the combined escape function needs a spherically symmetric metric")
    r = np.linspace(0.0, 4.0 * metric.R0, 4001)
    b_floor = float(np.min(metric.speed(r)))
    return CombinedEscape(metric, damping, list(triples), nontrap, float(sigma), kappa, stencil_h, b_floor)


def _quadratic(t1, v1, t2, v2, t3, v3):
    """Coefficients (E, F, G) of the quadratic through three points."""
    d12, d13, d23 = t1 - t2, t1 - t3, t2 - t3
    l1, l2, l3 = v1 / (d12 * d13), -v2 / (d12 * d23), v3 / (d13 * d23)
    E = l1 + l2 + l3
    F = -(l1 * (t2 + t3) + l2 * (t1 + t3) + l3 * (t1 + t2))
    G = l1 * t2 * t3 + l2 * t1 * t3 + l3 * t1 * t2
    return E, F, G


def vertex_correction(E, F, G, bp, bm):
    """m~ minimizing the discriminant of the corrected quadratic."""
    return -(F * (bp + bm) + 2.0 * E * bp * bm + 2.0 * G) / (bp - bm) ** 2


def discriminant(E, F, G, bp, bm, mt):
    """Discriminant in tau of E tau^2 + F tau + G - mt (tau - bp)(tau - bm)."""
    return (F + mt * (bp + bm)) ** 2 - 4.0 * (E - mt) * (G - mt * bp * bm)


def _piece_data(ce: CombinedEscape, states):
    """Flow derivatives of both branch pieces at tau in {b+, b-, (b+ + b-)/2}.

    For a spherically symmetric metric each piece is exactly quadratic in
    tau, so three nodes determine it; tau of the input states is only used
    when the quadratic is evaluated.
    """
    states = np.asarray(states, dtype=float)
    n = len(states)
    bp = b_pm(ce.metric, states[:, 1:4], states[:, 5:8], "plus")
    bm = b_pm(ce.metric, states[:, 1:4], states[:, 5:8], "minus")
    if np.any((bp - bm) ** 2 < 1e-12 * np.sum(states[:, 5:8] ** 2, axis=-1)):
        raise SingularCorrection("b+ and b- coincide")
    nodes = np.stack([bp, bm, 0.5 * (bp + bm)])
    stacked = np.repeat(states[None], 3, axis=0)
    stacked[..., 4] = nodes
    pc = ce.pieces(stacked.reshape(-1, 8))
    data = {"states": states, "bp": bp, "bm": bm, "nodes": nodes, "ratio": 0.0, "unbounded": False}
    for sign in (1.0, -1.0):
        p = pc[sign]
        data[sign] = {"D": p["D"].reshape(3, n), "W": p["W"].reshape(3, n), "L": p["L"].reshape(3, n)[0]}
        proj = p["proj"]
        a = ce.damping.a(proj[..., 0], proj[..., 1:4])
        A = p["A"]
        live = A > 0
        if np.any(live & (a <= 0)):
            data["unbounded"] = True
        live &= a > 0
        if np.any(live):
            data["ratio"] = max(data["ratio"], float(np.max(A[live] / a[live])))
    return data


def _assemble(data, kappa):
    states, bp, bm, nodes = data["states"], data["bp"], data["bm"], data["nodes"]
    tau = states[:, 4]
    delta2 = (bp - bm) ** 2
    res = {"bplus": bp, "bminus": bm}
    parts = []
    for sign in (1.0, -1.0):
        d = data[sign]
        val = d["D"] + kappa * d["W"]
        E, F, G = _quadratic(nodes[0], val[0], nodes[1], val[1], nodes[2], val[2])
        mt = vertex_correction(E, F, G, bp, bm)
        raw = (E * tau + F) * tau + G
        corrected = raw - mt * (tau - bp) * (tau - bm)
        own = val[0] if sign > 0 else val[1]
        res[sign] = {"L": d["L"], "E": E, "F": F, "G": G, "mtilde": mt, "on_char": own,
                     "raw": raw, "corrected": corrected,
                     "identity_residual": (E - mt) - own / delta2,
                     "other_root": val[1] if sign > 0 else val[0]}
        parts.append((d["L"], corrected))
    (L1, v1), (L2, v2) = parts
    Lm = np.maximum(L1, L2)
    res["master_log_scale"] = Lm
    res["master_scaled"] = v1 * np.exp(L1 - Lm) + v2 * np.exp(L2 - Lm)
    # sign of -4 R+ R- / Delta^2, the discriminant of the corrected sum
    res["disc_sign"] = -np.sign(res[1.0]["on_char"] * res[-1.0]["on_char"])
    return res


def master_terms(ce: CombinedEscape, states, kappa=None):
    """Master expression (H_p + 2 kappa tau a) q + p m at the given states.

    Each branch piece is corrected with its own vertex value m~, which turns
    it into R u^2 with u = (tau - b-)/(b+ - b-) (resp. 1 - u). The sum is
    returned on a log scale: master = master_scaled * exp(master_log_scale).
    """
    kappa = ce.kappa if kappa is None else kappa
    res = _assemble(_piece_data(ce, states), kappa)
    g00 = ce.metric.g_inv(np.asarray(states, dtype=float)[:, 1:4])[:, 0, 0]
    res["m"] = {s: -res[s]["mtilde"] / g00 for s in (1.0, -1.0)}
    return res


def calibrate_kappa(ratio, sigma, margin=1.1, floor=1.0):
    """kappa = C_a sigma / 2 with C_a a measured bound sum A <= C_a a."""
    return margin * max(floor, ratio) * sigma / 2.0


def master_samples(metric, spec, triples=(), period=1.0):
    """Sample states for the master inequality check.

    spec keys: n, seed, x_max, xi_range, tau_range, t_range, near_fraction.
    A fraction of the samples is drawn from the chart neighbourhoods of the
    local triples so that the trapped-region terms are exercised.
    """
    rng = np.random.default_rng(spec.get("seed", 0))
    n = int(spec.get("n", 10_000))
    x_max = float(spec.get("x_max", 2.0 * metric.R0))
    k_lo, k_hi = spec.get("xi_range", (1.0, 10.0))
    t_lo, t_hi = spec.get("tau_range", (1.0, 10.0))
    tr_lo, tr_hi = spec.get("t_range", (0.0, 5.0))
    n_near = int(round(n * spec.get("near_fraction", 0.5))) if triples else 0
    n_far = n - n_near
    x = _ball_points(rng, n_far, x_max)
    d = rng.normal(size=(n_far, 3))
    xi = d / np.linalg.norm(d, axis=-1, keepdims=True) * rng.uniform(k_lo, k_hi, size=(n_far, 1))
    t = rng.uniform(tr_lo, tr_hi, size=n_far)
    rows = [np.column_stack([t, x, np.zeros(n_far), xi])]
    if n_near:
        which = rng.integers(0, len(triples), size=n_near)
        for i, tr in enumerate(triples):
            m = int(np.sum(which == i))
            if m == 0:
                continue
            s, z, zeta = sample_triple(tr, m, rng)
            pts = tr.chart.forward(s, z, zeta)
            pts[:, 0] += period * rng.integers(0, 5, size=m)
            lam = rng.uniform(k_lo, k_hi, size=m) / np.linalg.norm(pts[:, 5:8], axis=-1)
            pts[:, 5:8] *= lam[:, None]
            rows.append(pts)
    st = np.concatenate(rows)
    keep = np.linalg.norm(st[:, 1:4], axis=-1) <= x_max
    st = st[keep]
    st[:, 4] = rng.choice([-1.0, 1.0], size=len(st)) * rng.uniform(t_lo, t_hi, size=len(st))
    return st


def verify_master_inequality(ce: CombinedEscape, metric, damping, sample_spec, chunk=2000):
    """Min over samples of (H_p q + 2 kappa tau a q + p m) / (<x>^-4 (tau^2 + |xi|^2)).

    When ce.kappa is None it is calibrated from the same samples. Returns
    (min_normalized_residual, witness, summary).
    """
    states = master_samples(metric, sample_spec, ce.triples, _period(damping))
    data = [_piece_data(ce, states[i:i + chunk]) for i in range(0, len(states), chunk)]
    ratio = max(d["ratio"] for d in data)
    if any(d["unbounded"] for d in data):
        ratio = math.inf
    if ce.kappa is None:
        ce.kappa = calibrate_kappa(ratio, ce.sigma)
    best, witness = math.inf, None
    disc_ok, ident = True, 0.0
    for d in data:
        st = d["states"]
        res = _assemble(d, ce.kappa)
        weight = bracket(st[:, 1:4]) ** 4 / (st[:, 4] ** 2 + np.sum(st[:, 5:8] ** 2, axis=-1))
        with np.errstate(over="ignore", invalid="ignore"):
            norm = res["master_scaled"] * weight * np.exp(res["master_log_scale"])
        disc_ok &= bool(np.all(res["disc_sign"] < 0))
        for s in (1.0, -1.0):
            scale = np.abs(res[s]["on_char"]) / (d["bp"] - d["bm"]) ** 2 + 1e-300
            ident = max(ident, float(np.max(np.abs(res[s]["identity_residual"]) / scale)))
        j = int(np.argmin(norm))
        if norm[j] < best:
            best = float(norm[j])
            witness = {"state": st[j].tolist(), "normalized_residual": best,
                       "log10_scale": float(res["master_log_scale"][j] / math.log(10.0))}
    return best, witness, {"n_samples": len(states), "discriminant_negative": disc_ok,
                           "kappa": ce.kappa, "sigma": ce.sigma, "C_a": ratio,
                           "identity_rel_residual": ident}


# ---------------------------------------------------------------------------
# end-to-end search
# ---------------------------------------------------------------------------

@dataclass
class EscapeReport:
    sigma: float
    kappa: float
    min_residual: float
    witness: dict
    discriminant_negative: bool
    n_samples: int
    r0: float
    local_min_residual: float
    local_max_domination: float
    n_triples: int
    Cbar2: float
    history: list

    @property
    def passed(self):
        return self.min_residual > 0 and self.discriminant_negative and self.local_min_residual >= -1e-8

    def to_dict(self):
        return {k: (v if not isinstance(v, np.ndarray) else v.tolist()) for k, v in self.__dict__.items()} | {
            "passed": self.passed}


def escape_search(metric, damping, trapped_samples, Cbar2, decomp=None, sample_spec=None,
                  sigma0=8.0, sigma_cap=2.0 ** 10, local_samples=10_000, r0=None, seed=0,
                  R_factor=1.5, branch="plus"):
    """Build triples, then double sigma until the master inequality holds."""
    decomp = decomp or AnnulusDecomposition()
    sample_spec = dict(sample_spec or {})
    sample_spec.setdefault("seed", seed)
    if r0 is None:
        r0 = r0_search(metric, damping, trapped_samples, Cbar2, seed=seed, branch=branch) if trapped_samples else 0.5
    triples = [build_local_triple(metric, damping, w, branch, {"Cbar2": Cbar2, "r0": r0})
               for w in trapped_samples]
    lres, ldom = math.inf, -math.inf
    for i, tr in enumerate(triples):
        res, dom, _ = local_check(tr, metric, damping, local_samples, seed + i)
        lres, ldom = min(lres, res), max(ldom, dom)
    theta = build_trap_indicator(metric, damping)
    R = R_factor * metric.R0
    sigma = sigma0
    history = []
    while True:
        nt = build_nontrapping(metric, decomp, sigma, R, damping, theta)
        ce = combine_and_correct(metric, damping, triples, nt, sigma)
        best, witness, info = verify_master_inequality(ce, metric, damping, sample_spec)
        history.append({"sigma": sigma, "kappa": ce.kappa, "min_residual": best})
        if (best > 0 and info["discriminant_negative"]) or sigma * 2 > sigma_cap:
            break
        sigma *= 2.0
    return EscapeReport(sigma, ce.kappa, best, witness, info["discriminant_negative"], info["n_samples"],
                        float(r0), float(lres if triples else 0.0), float(ldom if triples else 0.0),
                        len(triples), float(Cbar2), history)
