"""Metric and damping models, dyadic annulus bookkeeping and smooth cutoffs.

Metrics are stationary inverse metrics g^{ab}(x) on R^{1+3} given through
analytic closures for the matrix and its first two spatial derivatives.
Arrays follow the convention that leading axes are batch axes and the last
axis (or last two) hold the tensor indices, with index 0 the time slot.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize
from scipy.stats import qmc

from .errors import DegenerateMetric, NonFiniteSample

MINKOWSKI = np.diag([-1.0, 1.0, 1.0, 1.0])


def bracket(x):
    """Japanese bracket <x> = sqrt(1 + |x|^2) over the last axis."""
    x = np.asarray(x)
    return np.sqrt(1.0 + np.sum(x * x, axis=-1))


# ---------------------------------------------------------------------------
# smooth cutoffs
# ---------------------------------------------------------------------------

def _bump(v):
    """exp(-1/(4 v (1-v))) on (0, 1), zero elsewhere."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    m = (v > 0.0) & (v < 1.0)
    w = v[m]
    out[m] = np.exp(-1.0 / (4.0 * w * (1.0 - w)))
    return out


def _bump_d1(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    m = (v > 0.0) & (v < 1.0)
    w = v[m]
    out[m] = np.exp(-1.0 / (4.0 * w * (1.0 - w))) * (1.0 - 2.0 * w) / (4.0 * w * w * (1.0 - w) ** 2)
    return out


@lru_cache(maxsize=1)
def _step_constants():
    z, _ = integrate.quad(lambda v: float(_bump(np.array(v))), 0.0, 1.0, epsabs=0.0, epsrel=1e-12, limit=200)
    nodes, weights = np.polynomial.legendre.leggauss(60)
    return z, 0.5 * (nodes + 1.0), 0.5 * weights


def smooth_step_reference(u):
    """Quadrature evaluation of the step; slow, used to build the table."""
    u = np.asarray(u, dtype=float)
    z, nodes, weights = _step_constants()
    out = np.where(u >= 1.0, 1.0, 0.0)
    mid = (u > 0.0) & (u < 1.0)
    if np.any(mid):
        um = u[mid]
        lo = np.minimum(um, 1.0 - um)
        part = lo * (_bump(lo[:, None] * nodes[None, :]) @ weights) / z
        out[mid] = np.where(um <= 0.5, part, 1.0 - part)
    return out


_TABLE_N = 4096


@lru_cache(maxsize=1)
def _step_table():
    grid = np.linspace(0.0, 1.0, _TABLE_N + 1)
    z = _step_constants()[0]
    return grid, smooth_step_reference(grid), _bump(grid) / z, _bump_d1(grid) / z


def smooth_step(u):
    """C-infinity monotone step: 0 for u <= 0, 1 for u >= 1.

    Normalized primitive of the standard mollifier bump exp(-1/(1-s^2))
    (rescaled to [0, 1]); evaluated by quintic Hermite interpolation of a
    quadrature table using the exact first and second derivatives.
    """
    u = np.asarray(u, dtype=float)
    grid, f, d1, d2 = _step_table()
    h = 1.0 / _TABLE_N
    uc = np.clip(u, 0.0, 1.0)
    i = np.minimum((uc * _TABLE_N).astype(np.int64), _TABLE_N - 1)
    t = (uc - grid[i]) / h
    t2, t3 = t * t, t * t * t
    h00 = 1 - 10 * t3 + 15 * t2 * t2 - 6 * t3 * t2
    h10 = t - 6 * t3 + 8 * t2 * t2 - 3 * t3 * t2
    h20 = 0.5 * (t2 - 3 * t3 + 3 * t2 * t2 - t3 * t2)
    h01 = 10 * t3 - 15 * t2 * t2 + 6 * t3 * t2
    h11 = -4 * t3 + 7 * t2 * t2 - 3 * t3 * t2
    h21 = 0.5 * (t3 - 2 * t2 * t2 + t3 * t2)
    val = (h00 * f[i] + h10 * h * d1[i] + h20 * h * h * d2[i]
           + h01 * f[i + 1] + h11 * h * d1[i + 1] + h21 * h * h * d2[i + 1])
    return np.where(u <= 0.0, 0.0, np.where(u >= 1.0, 1.0, val))


def smooth_step_d1(u):
    z = _step_constants()[0]
    return _bump(u) / z


def smooth_step_d2(u):
    z = _step_constants()[0]
    return _bump_d1(u) / z


@dataclass(frozen=True)
class SmoothCutoff:
    """Smooth cutoff of one real variable.

    kinds:
      "lt"       1 on |r| <= R, 0 on |r| >= 2R
      "gt"       1 - ("lt" with the same R)
      "annular"  1 on lo <= |r| <= hi, 0 outside [lo - width, hi + width]
      "interval" same as annular but in the signed variable r
    """
    kind: str
    R: float | None = None
    lo: float | None = None
    hi: float | None = None
    width: float | None = None

    def __post_init__(self):
        if self.kind in ("lt", "gt"):
            if self.R is None or self.R <= 0:
                raise ValueError("radial cutoff needs R > 0")
        elif self.kind in ("annular", "interval"):
            if None in (self.lo, self.hi, self.width) or self.width <= 0 or self.hi < self.lo:
                raise ValueError("band cutoff needs lo <= hi and width > 0")
        else:
            raise ValueError(f"unknown cutoff kind {self.kind!r}")

    def _band(self, r, order):
        lo, hi, w = self.lo, self.hi, self.width
        ul = (r - (lo - w)) / w
        ur = (r - hi) / w
        if order == 0:
            return smooth_step(ul) * (1.0 - smooth_step(ur))
        if order == 1:
            return (smooth_step_d1(ul) * (1.0 - smooth_step(ur)) - smooth_step(ul) * smooth_step_d1(ur)) / w
        return (smooth_step_d2(ul) * (1.0 - smooth_step(ur))
                - 2.0 * smooth_step_d1(ul) * smooth_step_d1(ur)
                - smooth_step(ul) * smooth_step_d2(ur)) / w ** 2

    def deriv(self, r, order=0):
        if order not in (0, 1, 2):
            raise ValueError("order must be 0, 1 or 2")
        r = np.asarray(r, dtype=float)
        if self.kind == "interval":
            return self._band(r, order)
        sgn = np.where(r < 0, -1.0, 1.0)
        ar = np.abs(r)
        if self.kind == "annular":
            val = self._band(ar, order)
        else:
            u = (ar - self.R) / self.R
            if order == 0:
                val = 1.0 - smooth_step(u)
            elif order == 1:
                val = -smooth_step_d1(u) / self.R
            else:
                val = -smooth_step_d2(u) / self.R ** 2
            if self.kind == "gt":
                val = (1.0 - val) if order == 0 else -val
        return val * sgn if order == 1 else val

    def __call__(self, r):
        return self.deriv(r, 0)

    def deriv_bounds(self):
        """Declared sup bounds of |chi'| and |chi''|."""
        v = np.linspace(0.0, 1.0, 20001)
        d1 = float(np.max(np.abs(smooth_step_d1(v))))
        d2 = float(np.max(np.abs(smooth_step_d2(v))))
        scale = self.R if self.kind in ("lt", "gt") else self.width
        return 1.0001 * d1 / scale, 1.0001 * d2 / scale ** 2


def cutoff_eval(c: SmoothCutoff, r):
    return c(r)


def cutoff_deriv(c: SmoothCutoff, r, order=0):
    return c.deriv(r, order)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpacetimeMetric:
    """Stationary inverse metric g^{ab}(x); subclasses supply _g, _dg, _d2g
    in unscaled coordinates. ``kappa`` evaluates the metric at kappa * x."""
    kappa: float = field(default=1.0, kw_only=True)

    name = "metric"
    isotropic = False
    g00_bound = 1.0     # g^{00} <= -1/g00_bound

    def g_inv(self, x):
        x = np.asarray(x)
        return self._g(self.kappa * x)

    def dg_inv(self, x):
        """Array [..., k, a, b] = d_k g^{ab}."""
        x = np.asarray(x)
        return self.kappa * self._dg(self.kappa * x)

    def d2g_inv(self, x):
        """Array [..., k, l, a, b] = d_k d_l g^{ab}."""
        x = np.asarray(x)
        return self.kappa ** 2 * self._d2g(self.kappa * x)

    @property
    def R0(self):
        return self._R0() / self.kappa

    def rescaled(self, kappa):
        return replace(self, kappa=self.kappa * kappa)

    def _R0(self):
        return 1.0


@dataclass(frozen=True)
class ConformalMetric(SpacetimeMetric):
    """g^{00} = -1, g^{0j} = 0, g^{ij} = c(|x|)^2 delta^{ij}."""

    isotropic = True

    def _c(self, r):
        return np.ones_like(r)

    def _c1(self, r):
        return np.zeros_like(r)

    def _c2(self, r):
        return np.zeros_like(r)

    def speed(self, r):
        return self._c(self.kappa * np.asarray(r))

    def speed_d1(self, r):
        return self.kappa * self._c1(self.kappa * np.asarray(r))

    def speed_d2(self, r):
        return self.kappa ** 2 * self._c2(self.kappa * np.asarray(r))

    def max_speed(self):
        return 1.0

    @staticmethod
    def _radius(x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        rs = np.where(np.real(r) > 1e-14, r, 1e-14)
        return r, rs

    def g_inv(self, x):
        x = np.asarray(x)
        r, _ = self._radius(x)
        c = self.speed(r)
        out = np.zeros(x.shape[:-1] + (4, 4), dtype=np.result_type(x, float))
        out[..., 0, 0] = -1.0
        for i in range(1, 4):
            out[..., i, i] = c * c
        return out

    def dg_inv(self, x):
        x = np.asarray(x)
        r, rs = self._radius(x)
        c, c1 = self.speed(r), self.speed_d1(r)
        grad = (2.0 * c * c1 / rs)[..., None] * x          # d_k c^2
        out = np.zeros(x.shape[:-1] + (3, 4, 4), dtype=np.result_type(x, float))
        for i in range(1, 4):
            out[..., :, i, i] = grad
        return out

    def d2g_inv(self, x):
        x = np.asarray(x)
        r, rs = self._radius(x)
        c, c1, c2 = self.speed(r), self.speed_d1(r), self.speed_d2(r)
        n = x / rs[..., None]
        radial = 2.0 * c1 * c1 + 2.0 * c * c2
        tang = 2.0 * c * c1 / rs
        eye = np.eye(3)
        hess = (radial - tang)[..., None, None] * n[..., :, None] * n[..., None, :] + tang[..., None, None] * eye
        out = np.zeros(x.shape[:-1] + (3, 3, 4, 4), dtype=np.result_type(x, float))
        for i in range(1, 4):
            out[..., :, :, i, i] = hess
        return out


@dataclass(frozen=True)
class MinkowskiMetric(ConformalMetric):
    name = "minkowski"


@dataclass(frozen=True)
class PhotonSphereMetric(ConformalMetric):
    """Sound-speed bump c(r) = 1 + A exp(-(r - rc)^2 / w^2)."""
    A: float = 0.8
    rc: float = 3.0
    w: float = 0.6

    name = "photon-sphere"

    def _gauss(self, r):
        return self.A * np.exp(-((r - self.rc) ** 2) / self.w ** 2)

    def _c(self, r):
        return 1.0 + self._gauss(r)

    def _c1(self, r):
        return -2.0 * (r - self.rc) / self.w ** 2 * self._gauss(r)

    def _c2(self, r):
        d = r - self.rc
        return self._gauss(r) * (4.0 * d * d / self.w ** 4 - 2.0 / self.w ** 2)

    def max_speed(self):
        return 1.0 + max(self.A, 0.0)

    def support_radius(self):
        # exp(-16) ~ 1e-7: the Gaussian is treated as supported in r < rc + 4w
        return (self.rc + 4.0 * self.w) / self.kappa

    def _R0(self):
        return self.rc + 4.0 * self.w + 1.0


@dataclass(frozen=True)
class DriftMetric(SpacetimeMetric):
    """Non-conformal stationary perturbation with a rotational g^{0j} drift.

    With phi = exp(-|x|^2 / L^2):
      g^{00} = -(1 + gamma phi), g^{0j} = eps phi (-x2, x1, 0)_j,
      g^{ij} = (1 + beta phi) delta^{ij}.
    """
    eps: float = 0.2
    beta: float = 0.3
    gamma: float = 0.2
    L: float = 1.5

    name = "drift"

    def _phi(self, x):
        return np.exp(-np.sum(x * x, axis=-1) / self.L ** 2)

    @staticmethod
    def _omega(x):
        om = np.zeros_like(x)
        om[..., 0] = -x[..., 1]
        om[..., 1] = x[..., 0]
        return om

    _W = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])   # W[k, j] = d_k omega_j

    def _g(self, x):
        phi = self._phi(x)
        out = np.zeros(x.shape[:-1] + (4, 4), dtype=np.result_type(x, float))
        out[..., 0, 0] = -(1.0 + self.gamma * phi)
        drift = self.eps * phi[..., None] * self._omega(x)
        out[..., 0, 1:] = drift
        out[..., 1:, 0] = drift
        for i in range(1, 4):
            out[..., i, i] = 1.0 + self.beta * phi
        return out

    def _dg(self, x):
        phi = self._phi(x)
        dphi = (-2.0 / self.L ** 2) * x * phi[..., None]              # [..., k]
        om = self._omega(x)
        out = np.zeros(x.shape[:-1] + (3, 4, 4), dtype=np.result_type(x, float))
        out[..., :, 0, 0] = -self.gamma * dphi
        d0j = self.eps * (self._W * phi[..., None, None] + dphi[..., :, None] * om[..., None, :])
        out[..., :, 0, 1:] = d0j
        out[..., :, 1:, 0] = d0j
        for i in range(1, 4):
            out[..., :, i, i] = self.beta * dphi
        return out

    def _d2g(self, x):
        phi = self._phi(x)
        L2 = self.L ** 2
        dphi = (-2.0 / L2) * x * phi[..., None]
        hphi = (4.0 / L2 ** 2) * x[..., :, None] * x[..., None, :] * phi[..., None, None] \
            - (2.0 / L2) * np.eye(3) * phi[..., None, None]                  # [..., k, l]
        om = self._omega(x)
        W = self._W
        out = np.zeros(x.shape[:-1] + (3, 3, 4, 4), dtype=np.result_type(x, float))
        out[..., :, :, 0, 0] = -self.gamma * hphi
        # d_k d_l (phi omega_j) = W_kj d_l phi + W_lj d_k phi + omega_j d_k d_l phi
        d2 = (W[:, None, :] * dphi[..., None, :, None] + W[None, :, :] * dphi[..., :, None, None]
              + hphi[..., :, :, None] * om[..., None, None, :])
        out[..., :, :, 0, 1:] = self.eps * d2
        out[..., :, :, 1:, 0] = self.eps * d2
        for i in range(1, 4):
            out[..., :, :, i, i] = self.beta * hphi
        return out

    def _R0(self):
        return 4.0 * self.L + 1.0


def photon_sphere_radii(metric: ConformalMetric, r_max=None, n_scan=4000):
    """Roots of r c'(r) = c(r), i.e. radii of circular null orbits."""
    if not metric.isotropic:
        raise ValueError("circular-orbit radii need a conformal metric")
    r_max = r_max if r_max is not None else 2.0 * metric.R0
    rs = np.linspace(1e-3, r_max, n_scan)

    def f(r):
        return float(r * metric.speed_d1(np.array(r)) - metric.speed(np.array(r)))

    vals = rs * metric.speed_d1(rs) - metric.speed(rs)
    roots = []
    for i in range(n_scan - 1):
        if vals[i] == 0.0:
            roots.append(float(rs[i]))
        elif vals[i] * vals[i + 1] < 0:
            roots.append(optimize.brentq(f, rs[i], rs[i + 1], xtol=1e-14, rtol=1e-14))
    return roots


def trapped_radius(metric: ConformalMetric):
    """Radius of the stable circular orbit (inner root, local max of r/c)."""
    roots = photon_sphere_radii(metric)
    if not roots:
        raise ValueError("metric has no circular null orbit")
    return roots[0]


# ---------------------------------------------------------------------------
# damping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DampingProfile:
    """Nonnegative damping a(t, x); ``kappa`` evaluates it at (kappa t, kappa x)."""
    kappa: float = field(default=1.0, kw_only=True)

    name = "damping"
    stationary = True

    def a(self, t, x):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        return self._a(self.kappa * t, self.kappa * x)

    def da(self, t, x):
        """Space-time gradient [..., (d_t, d_1, d_2, d_3)]."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        return self.kappa * self._da(self.kappa * t, self.kappa * x)

    def rescaled(self, kappa):
        return replace(self, kappa=self.kappa * kappa)

    def time_period(self):
        """Period in t for periodic time dependence, None otherwise."""
        return None

    def separable(self):
        """(spatial(x), temporal(t)) with a = spatial * temporal, or None.

        Lets grid solvers sample the spatial factor once.
        """
        if self.stationary:
            return (lambda x: self.a(0.0, x)), (lambda t: 1.0)
        return None

    def sup(self):
        """Upper bound for a (metadata)."""
        return 0.0

    def lipschitz(self):
        """Bound on |da|, the modulus of continuity carried as metadata."""
        return 0.0

    def _a(self, t, x):
        return np.zeros(np.broadcast_shapes(np.shape(t), x.shape[:-1]))

    def _da(self, t, x):
        return np.zeros(np.broadcast_shapes(np.shape(t), x.shape[:-1]) + (4,))


@dataclass(frozen=True)
class ZeroDamping(DampingProfile):
    name = "zero"


@dataclass(frozen=True)
class ConstantDamping(DampingProfile):
    level: float = 0.5

    name = "constant"

    def _a(self, t, x):
        return np.full(np.broadcast_shapes(np.shape(t), x.shape[:-1]), self.level)

    def sup(self):
        return self.level


@dataclass(frozen=True)
class AnnularDamping(DampingProfile):
    """a = chi(|x|) (level + pulse m(t)) with chi = 1 on [lo, hi].

    m(t) = sin^2(pi t / period) when modulated, else its mean 1/2.
    """
    lo: float = 1.4
    hi: float = 3.1
    width: float = 0.3
    level: float = 0.1
    pulse: float = 1.0
    period: float = 1.0
    modulated: bool = True

    name = "annular"

    @property
    def stationary(self):
        return not self.modulated or self.pulse == 0.0

    def _chi(self):
        return SmoothCutoff("annular", lo=self.lo, hi=self.hi, width=self.width)

    def _m(self, t):
        if self.modulated:
            return np.sin(np.pi * t / self.period) ** 2
        return np.full(np.shape(t), 0.5)

    def _dm(self, t):
        if self.modulated:
            return (np.pi / self.period) * np.sin(2.0 * np.pi * t / self.period)
        return np.zeros(np.shape(t))

    def _a(self, t, x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        return self._chi()(r) * (self.level + self.pulse * self._m(t))

    def _da(self, t, x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        chi = self._chi()
        amp = self.level + self.pulse * self._m(t)
        dr = chi.deriv(r, 1) * amp
        rs = np.where(r > 1e-14, r, 1e-14)
        shape = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        out = np.zeros(shape + (4,))
        out[..., 0] = chi(r) * self.pulse * self._dm(t)
        out[..., 1:] = (dr / rs)[..., None] * x
        return out

    def time_period(self):
        return self.period / self.kappa if not self.stationary else None

    def separable(self):
        k = self.kappa

        def spatial(x):
            return self._chi()(k * np.sqrt(np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)))

        return spatial, (lambda t: float(self.level + self.pulse * self._m(k * np.asarray(t, dtype=float))))

    def sup(self):
        return self.level + self.pulse

    def lipschitz(self):
        return self.sup() * self._chi().deriv_bounds()[0] + self.pulse * np.pi / self.period


@dataclass(frozen=True)
class BallDamping(DampingProfile):
    """a = level chi_{<R}(|x|), supported in |x| < 2R."""
    R: float = 0.5
    level: float = 1.0

    name = "ball"

    def _a(self, t, x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        val = self.level * SmoothCutoff("lt", R=self.R)(r)
        return np.broadcast_to(val, np.broadcast_shapes(np.shape(t), val.shape)).copy()

    def _da(self, t, x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        rs = np.where(r > 1e-14, r, 1e-14)
        dr = self.level * SmoothCutoff("lt", R=self.R).deriv(r, 1)
        shape = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        out = np.zeros(shape + (4,))
        out[..., 1:] = (dr / rs)[..., None] * x
        return out

    def sup(self):
        return self.level


@dataclass(frozen=True)
class InverseSquareDamping(DampingProfile):
    """a = level <x>^{-2}."""
    level: float = 1.0

    name = "inverse-square"

    def _a(self, t, x):
        val = self.level / (1.0 + np.sum(x * x, axis=-1))
        return np.broadcast_to(val, np.broadcast_shapes(np.shape(t), val.shape)).copy()

    def _da(self, t, x):
        b2 = 1.0 + np.sum(x * x, axis=-1)
        shape = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        out = np.zeros(shape + (4,))
        out[..., 1:] = (-2.0 * self.level / b2 ** 2)[..., None] * x
        return out

    def sup(self):
        return self.level


# ---------------------------------------------------------------------------
# asymptotic flatness bookkeeping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnnulusDecomposition:
    J_max: int = 10
    delta: float = 0.25
    c_bound: float = 0.05

    @property
    def annuli(self):
        """Bracket ranges A_j = {2^{j-1} <= <x> <= 2^{j+1}}, j = 0..J_max."""
        return [(2.0 ** (j - 1), 2.0 ** (j + 1)) for j in range(self.J_max + 1)]


def annulus_points(j, n):
    """Deterministic nested sample of A_j (first n points of a Halton sequence)."""
    lo, hi = max(1.0, 2.0 ** (j - 1)), 2.0 ** (j + 1)
    u = qmc.Halton(d=3, scramble=False).random(n + 1)[1:]
    br = lo + (hi - lo) * u[:, 0]
    r = np.sqrt(np.maximum(br * br - 1.0, 0.0))
    z = 2.0 * u[:, 1] - 1.0
    ang = 2.0 * np.pi * u[:, 2]
    s = np.sqrt(1.0 - z * z)
    d = np.stack([s * np.cos(ang), s * np.sin(ang), z], axis=-1)
    return r[:, None] * d


def _pointwise_af(metric, damping, x, times):
    b = bracket(x)
    g = metric.g_inv(x)
    if not np.all(np.isfinite(g)):
        raise NonFiniteSample("metric returned a non-finite value")
    if np.any(g[..., 0, 0] >= 0.0):
        raise DegenerateMetric("g^00 >= 0 at a sample point")
    dg = metric.dg_inv(x)
    d2g = metric.d2g_inv(x)
    h0 = np.sqrt(np.sum((g - MINKOWSKI) ** 2, axis=(-2, -1)))
    h1 = np.sqrt(np.sum(dg ** 2, axis=(-3, -2, -1)))
    h2 = np.sqrt(np.sum(d2g ** 2, axis=(-4, -3, -2, -1)))
    val = h0 + b * h1 + b * b * h2
    best = None
    for t in times:
        a = damping.a(t, x)
        da = damping.da(t, x)
        tot = val + b * np.abs(a) + b * b * np.sqrt(np.sum(da ** 2, axis=-1))
        best = tot if best is None else np.maximum(best, tot)
    if not np.all(np.isfinite(best)):
        raise NonFiniteSample("non-finite AF sample")
    return best


def annulus_norms(metric, damping, decomp: AnnulusDecomposition, samples_per_annulus=512, times=(0.0,),
                  r_min=0.0):
    """Per-annulus sampled AF norms, optionally restricted to |x| >= r_min."""
    if samples_per_annulus < 8 ** 3:
        raise ValueError("samples_per_annulus must be at least 512")
    out = []
    for j in range(decomp.J_max + 1):
        x = annulus_points(j, samples_per_annulus)
        x = x[np.linalg.norm(x, axis=-1) >= r_min]
        out.append(float(np.max(_pointwise_af(metric, damping, x, times))) if len(x) else 0.0)
    return np.array(out)


def af_norm(metric, damping, decomp: AnnulusDecomposition, samples_per_annulus=512, times=(0.0,)):
    """Sampled estimate of the AF norm of (g - m, a), truncated at J_max.

    Per sample point the value is |g-m| + <x>|dg| + <x>^2|d^2 g| + <x>|a| + <x>^2|da|
    (Frobenius norms of the derivative tensors); each annulus contributes its
    maximum over the samples.
    """
    return float(np.sum(annulus_norms(metric, damping, decomp, samples_per_annulus, times)))


def majorant(raw, delta, floor=1e-12):
    """Smallest slowly varying majorant c_j = max_k raw_k 2^{-delta |k-j|},
    kept above floor 2^{-delta j}."""
    raw = np.asarray(raw, dtype=float)
    j = np.arange(raw.size)
    weights = 2.0 ** (-delta * np.abs(j[:, None] - j[None, :]))
    c = np.max(raw[None, :] * weights, axis=1)
    return np.maximum(c, floor * 2.0 ** (-delta * j))


def cj_sequence(metric, damping, decomp: AnnulusDecomposition, samples_per_annulus=512, floor=1e-12,
                r_min=0.0):
    """Slowly varying majorant of the per-annulus AF norms."""
    raw = annulus_norms(metric, damping, decomp, samples_per_annulus, r_min=r_min)
    return majorant(raw, decomp.delta, floor)


def build_metric(name, **params):
    table = {"minkowski": MinkowskiMetric, "photon-sphere": PhotonSphereMetric, "drift": DriftMetric}
    if name not in table:
        raise KeyError(name)
    return table[name](**params)


def build_damping(name, **params):
    table = {"zero": ZeroDamping, "constant": ConstantDamping, "annular": AnnularDamping,
             "ball": BallDamping, "inverse-square": InverseSquareDamping}
    if name not in table:
        raise KeyError(name)
    return table[name](**params)

