"""Leapfrog solver for u_tt = div(c^2 grad u) - a u_t + f on a box with
Dirichlet walls, plus energy and local-energy instrumentation.

The scheme is conservative in space (face-centered coefficients) and time
centered in the damping term:

    (1 + a dt/2) u^{n+1} = 2 u^n - (1 - a dt/2) u^{n-1} + dt^2 (L u^n + f^n)

Only metrics with g^00 = -1, g^0j = 0 and g^ij = c(|x|)^2 delta^ij are
supported.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .errors import CflViolation, NonFinite
from .lenorms import shell_index

CFL_MAX = 0.5


@njit(parallel=True, cache=True)
def _leapfrog(u_prev, u, kx, ky, kz, a, f, dt, h, out):
    n0, n1, n2 = u.shape
    r = dt * dt / (h * h)
    for i in prange(1, n0 - 1):
        for j in range(1, n1 - 1):
            for k in range(1, n2 - 1):
                c = u[i, j, k]
                lap = (kx[i, j, k] * (u[i + 1, j, k] - c) - kx[i - 1, j, k] * (c - u[i - 1, j, k])
                       + ky[i, j, k] * (u[i, j + 1, k] - c) - ky[i, j - 1, k] * (c - u[i, j - 1, k])
                       + kz[i, j, k] * (u[i, j, k + 1] - c) - kz[i, j, k - 1] * (c - u[i, j, k - 1]))
                ad = 0.5 * a[i, j, k] * dt
                out[i, j, k] = (2.0 * c - (1.0 - ad) * u_prev[i, j, k] + r * lap
                                + dt * dt * f[i, j, k]) / (1.0 + ad)
    return out


@njit(parallel=True, cache=True)
def _apply_operator(u, kx, ky, kz, h, out):
    """div(c^2 grad u) at interior nodes."""
    n0, n1, n2 = u.shape
    for i in prange(1, n0 - 1):
        for j in range(1, n1 - 1):
            for k in range(1, n2 - 1):
                c = u[i, j, k]
                out[i, j, k] = (kx[i, j, k] * (u[i + 1, j, k] - c) - kx[i - 1, j, k] * (c - u[i - 1, j, k])
                                + ky[i, j, k] * (u[i, j + 1, k] - c) - ky[i, j - 1, k] * (c - u[i, j - 1, k])
                                + kz[i, j, k] * (u[i, j, k + 1] - c) - kz[i, j, k - 1] * (c - u[i, j, k - 1])) / (h * h)
    return out


@njit(parallel=True, cache=True)
def _gradient_energy(u, kx, ky, kz, h):
    """sum over faces of c^2 (difference quotient)^2, times h^3."""
    n0, n1, n2 = u.shape
    acc = np.zeros(n0)
    for i in prange(n0):
        s = 0.0
        for j in range(n1):
            for k in range(n2):
                if i < n0 - 1:
                    d = u[i + 1, j, k] - u[i, j, k]
                    s += kx[i, j, k] * d * d
                if j < n1 - 1:
                    d = u[i, j + 1, k] - u[i, j, k]
                    s += ky[i, j, k] * d * d
                if k < n2 - 1:
                    d = u[i, j, k + 1] - u[i, j, k]
                    s += kz[i, j, k] * d * d
        acc[i] = s
    return acc.sum() * h


@njit(parallel=True, cache=True)
def _shell_sums(u, ut, label, w1, w3, n_labels, h):
    """Per-shell sums of <x>^-1 |(u_t, grad u)|^2 and <x>^-3 u^2 (times h^3),
    with centered spatial differences at interior nodes."""
    n0, n1, n2 = u.shape
    part1 = np.zeros((n0, n_labels))
    part3 = np.zeros((n0, n_labels))
    for i in prange(1, n0 - 1):
        for j in range(1, n1 - 1):
            for k in range(1, n2 - 1):
                lab = label[i, j, k]
                if lab < 0:
                    continue
                gx = (u[i + 1, j, k] - u[i - 1, j, k]) / (2.0 * h)
                gy = (u[i, j + 1, k] - u[i, j - 1, k]) / (2.0 * h)
                gz = (u[i, j, k + 1] - u[i, j, k - 1]) / (2.0 * h)
                v = ut[i, j, k]
                part1[i, lab] += w1[i, j, k] * (v * v + gx * gx + gy * gy + gz * gz)
                part3[i, lab] += w3[i, j, k] * u[i, j, k] * u[i, j, k]
    return part1.sum(axis=0) * h ** 3, part3.sum(axis=0) * h ** 3


@dataclass
class Grid:
    n: int
    L: float

    @property
    def h(self):
        return 2.0 * self.L / (self.n - 1)

    def axis(self):
        return -self.L + self.h * np.arange(self.n)

    def mesh(self):
        ax = self.axis()
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


def _check_solver_metric(metric):
    if not getattr(metric, "isotropic", False):
        raise ValueError("the wave solver needs g^00 = -1, g^0j = 0, g^ij = c^2 delta^ij")


def face_coefficients(metric, grid: Grid):
    """c^2 at the face midpoints in each direction."""
    _check_solver_metric(metric)
    ax, h = grid.axis(), grid.h
    mid = ax[:-1] + 0.5 * h
    out = []
    for d in range(3):
        axes = [ax, ax, ax]
        axes[d] = mid
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        c = metric.speed(np.sqrt(X * X + Y * Y + Z * Z))
        out.append(np.ascontiguousarray(c * c))
    return out


def sponge_profile(grid: Grid, width, strength):
    """Extra damping rising quadratically over the outer `width` of the box."""
    if width <= 0:
        return np.zeros((grid.n,) * 3)
    X = grid.mesh()
    d = np.max(np.abs(X), axis=-1)
    s = np.clip((d - (grid.L - width)) / width, 0.0, 1.0)
    return strength * s * s


@dataclass
class SolverState:
    u_prev: np.ndarray
    u_curr: np.ndarray
    t: float
    dt: float
    grid: Grid
    coeffs: list
    cfl: float
    sponge: np.ndarray | None = None
    step_count: int = 0

    def copy(self):
        return SolverState(self.u_prev.copy(), self.u_curr.copy(), self.t, self.dt, self.grid,
                           self.coeffs, self.cfl, self.sponge, self.step_count)


def _damping_field(damping, t, X, sponge):
    a = np.ascontiguousarray(damping.a(t, X), dtype=float)
    if sponge is not None:
        a = a + sponge
    return a


class WaveSolver:
    """Owns the grid, the coefficient fields and the damping cache."""

    def __init__(self, metric, damping, grid: Grid, cfl=0.4, sponge_width=0.0, sponge_strength=0.0):
        _check_solver_metric(metric)
        if not 0 < cfl <= CFL_MAX:
            raise CflViolation(f"cfl {cfl} outside (0, {CFL_MAX}]")
        self.metric, self.damping, self.grid = metric, damping, grid
        self.coeffs = face_coefficients(metric, grid)
        self.c_max = float(np.sqrt(max(np.max(k) for k in self.coeffs)))
        self.dt = cfl * grid.h / self.c_max
        self.cfl = cfl
        self.X = grid.mesh()
        self.sponge = sponge_profile(grid, sponge_width, sponge_strength) if sponge_width > 0 else None
        sep = damping.separable()
        if sep is not None:
            self._spatial = np.ascontiguousarray(sep[0](self.X), dtype=float)
            self._temporal = sep[1]
        else:
            self._spatial = self._temporal = None

    def _damping(self, t):
        if self._spatial is None:
            return _damping_field(self.damping, t, self.X, self.sponge)
        a = self._spatial * self._temporal(t)
        return a + self.sponge if self.sponge is not None else a

    def forcing_field(self, forcing, t):
        if forcing is None:
            return np.zeros((self.grid.n,) * 3)
        f = np.ascontiguousarray(forcing(t, self.X), dtype=float)
        return f

    def operator(self, u):
        return _apply_operator(u, *self.coeffs, self.grid.h, np.zeros_like(u))

    def initial_state(self, u0, u1, forcing=None, t0=0.0):
        """Second-order start: u^{-1} from a Taylor step backwards."""
        u0 = np.ascontiguousarray(u0, dtype=float)
        u1 = np.ascontiguousarray(u1, dtype=float)
        for arr in (u0, u1):
            arr[0, :, :] = arr[-1, :, :] = 0.0
            arr[:, 0, :] = arr[:, -1, :] = 0.0
            arr[:, :, 0] = arr[:, :, -1] = 0.0
        a = self._damping(t0)
        acc = self.operator(u0) - a * u1 + self.forcing_field(forcing, t0)
        u_prev = u0 - self.dt * u1 + 0.5 * self.dt ** 2 * acc
        u_prev[0, :, :] = u_prev[-1, :, :] = 0.0
        u_prev[:, 0, :] = u_prev[:, -1, :] = 0.0
        u_prev[:, :, 0] = u_prev[:, :, -1] = 0.0
        return SolverState(np.ascontiguousarray(u_prev), u0, t0, self.dt, self.grid, self.coeffs,
                           self.cfl, self.sponge)

    def step(self, state: SolverState, forcing=None, a=None, f=None):
        """One leapfrog step; returns the new state. a and f may be passed
        in when the caller already sampled them at state.t."""
        cfl = self.c_max * state.dt / state.grid.h
        if cfl > CFL_MAX + 1e-12:
            raise CflViolation(f"cfl {cfl:.3f} exceeds {CFL_MAX}")
        if a is None:
            a = self._damping(state.t)
        if f is None:
            f = self.forcing_field(forcing, state.t)
        new = _leapfrog(state.u_prev, state.u_curr, *self.coeffs, a, f, state.dt, state.grid.h,
                        np.zeros_like(state.u_curr))
        if not np.isfinite(new).all():
            raise NonFinite(f"non-finite values at t = {state.t + state.dt:.4g}")
        return SolverState(state.u_curr, new, state.t + state.dt, state.dt, state.grid, self.coeffs,
                           state.cfl, state.sponge, state.step_count + 1)

    def gradient_energy(self, u):
        return float(_gradient_energy(u, *self.coeffs, self.grid.h))


def step(solver: WaveSolver, state: SolverState, forcing=None):
    return solver.step(state, forcing)


def energy(solver: WaveSolver, u_prev, u_curr, u_next, dt):
    """Energy at the middle time level: centered u_t, face gradients."""
    ut = (u_next - u_prev) / (2.0 * dt)
    return float(np.sum(ut * ut) * solver.grid.h ** 3 + solver.gradient_energy(u_curr))


@dataclass
class RunHistory:
    """Per-level records t_n, E_n, int a u_t^2, int f u_t (levels 1..N-1)."""
    t: list = field(default_factory=list)
    E: list = field(default_factory=list)
    damp: list = field(default_factory=list)
    work: list = field(default_factory=list)
    dt: float = 0.0

    def arrays(self):
        return {k: np.asarray(getattr(self, k)) for k in ("t", "E", "damp", "work")}

    def to_csv(self, path):
        a = self.arrays()
        np.savetxt(path, np.column_stack([a["t"], a["E"], a["damp"], a["work"]]), delimiter=",",
                   header="t,energy,damping_integrand,forcing_work", comments="", fmt="%.17g")


def run(solver: WaveSolver, u0, u1, T, forcing=None, record=True, callback=None):
    """Advance to the first level at or past time T; returns (final state, RunHistory).

    Level n is recorded once u^{n+1} is known, so E_n uses the centered
    time difference. callback(n, t_n, u_prev, u_curr, u_next) is invoked at
    every recorded level.
    """
    st = solver.initial_state(u0, u1, forcing)
    hist = RunHistory(dt=solver.dt)
    n_steps = int(math.ceil(T / solver.dt - 1e-9))
    h3 = solver.grid.h ** 3
    for n in range(n_steps + 1):
        a = solver._damping(st.t)
        f = solver.forcing_field(forcing, st.t)
        nxt = solver.step(st, forcing, a, f)
        if record:
            ut = (nxt.u_curr - st.u_prev) / (2.0 * solver.dt)
            hist.t.append(st.t)
            hist.E.append(float(np.sum(ut * ut) * h3 + solver.gradient_energy(st.u_curr)))
            hist.damp.append(float(np.sum(a * ut * ut) * h3))
            hist.work.append(float(np.sum(f * ut) * h3))
        if callback is not None:
            callback(n, st.t, st.u_prev, st.u_curr, nxt.u_curr)
        st = nxt
    return st, hist


def dissipation_residual(history: RunHistory):
    """[E(t+dt) - E(t-dt)]/(2dt) - 2 int f u_t + 2 int a u_t^2, in units of E(0)."""
    a = history.arrays()
    E, dt = a["E"], history.dt
    dE = (E[2:] - E[:-2]) / (2.0 * dt)
    res = dE - 2.0 * a["work"][1:-1] + 2.0 * a["damp"][1:-1]
    return a["t"][1:-1], res / E[0]


def energy_identity_defect(history: RunHistory):
    """2 int_0^T int a u_t^2 + E(T) - E(0) - 2 int_0^T int f u_t (trapezoid in t)."""
    a = history.arrays()
    w = np.full(len(a["t"]), history.dt)
    w[0] = w[-1] = 0.5 * history.dt
    return float(2.0 * np.dot(w, a["damp"]) - 2.0 * np.dot(w, a["work"]) + a["E"][-1] - a["E"][0])


def equivalence_constant(metric, grid: Grid):
    """Ratio of the largest to the smallest of 1 and c^2 on the grid."""
    c = metric.speed(np.linspace(0.0, math.sqrt(3.0) * grid.L, 2001))
    c2 = c * c
    return float(max(1.0, c2.max()) / min(1.0, c2.min()))


def backward_energy_bound(history: RunHistory, T, a_sup, C_equiv=1.0, margin=1.1):
    """E(t) <= margin C e^{2 T sup a} E(T) for every recorded t <= T."""
    a = history.arrays()
    t, E = a["t"], a["E"]
    k = int(np.searchsorted(t, T - 1e-12))
    k = min(k, len(t) - 1)
    bound = margin * C_equiv * math.exp(2.0 * T * a_sup) * E[k]
    return bool(np.all(E[: k + 1] <= bound))


# ---------------------------------------------------------------------------
# initial data and the decay experiment
# ---------------------------------------------------------------------------

def gaussian_packet(grid: Grid, center=(2.15, 0.0, 0.0), width=0.5, k=(0.0, 2.0, 0.0), amplitude=1.0):
    """(u0, u1): a real Gaussian-modulated plane wave at rest (u1 = 0)."""
    X = grid.mesh()
    d = X - np.asarray(center, dtype=float)
    env = amplitude * np.exp(-np.sum(d * d, axis=-1) / (2.0 * width ** 2))
    u0 = env * np.cos(d @ np.asarray(k, dtype=float))
    return np.ascontiguousarray(u0), np.zeros_like(u0)


def initial_data(grid: Grid, spec):
    spec = dict(spec or {})
    kind = spec.pop("kind", "gaussian")
    if kind != "gaussian":
        raise ValueError(f"unknown initial data kind {kind!r}")
    return gaussian_packet(grid, **spec)


@dataclass
class DecayReport:
    t: np.ndarray
    energy: np.ndarray
    le1: np.ndarray
    ratio: np.ndarray
    shell_partials: np.ndarray
    du0: float
    crossing_time: float
    grid: dict

    def ratio_at(self, T):
        return float(np.interp(T, self.t, self.ratio))

    def to_dict(self):
        return {"du0": self.du0, "crossing_time": self.crossing_time, "grid": self.grid,
                "final_ratio": float(self.ratio[-1]), "final_energy": float(self.energy[-1])}

    def to_csv(self, path):
        cols = [f"le_shell{j}" for j in range(self.shell_partials.shape[1])]
        np.savetxt(path, np.column_stack([self.t, self.energy, self.le1, self.ratio, self.shell_partials]),
                   delimiter=",", header=",".join(["t", "energy", "le1", "ratio", *cols]), comments="",
                   fmt="%.17g")


def decay_experiment(metric, damping, init_spec, T, grid_spec, sample_every=1):
    """Run the solver and accumulate the [0, t] LE^1 norm.

    grid_spec: n, L, cfl, sponge_width, sponge_strength. Shells are measured
    inside the sponge-free region only. Returns a DecayReport whose ratio is
    LE^1[0, t] / ||du(0)||.
    """
    grid = Grid(int(grid_spec.get("n", 96)), float(grid_spec.get("L", 16.0)))
    sw = float(grid_spec.get("sponge_width", 0.0))
    solver = WaveSolver(metric, damping, grid, float(grid_spec.get("cfl", 0.4)), sw,
                        float(grid_spec.get("sponge_strength", 0.0)))
    u0, u1 = initial_data(grid, init_spec)
    R0 = getattr(metric, "R0", 1.0)
    if np.any((np.abs(u0) > 1e-8 * np.abs(u0).max()) & (np.linalg.norm(solver.X, axis=-1) > 2.0 * R0)):
        raise ValueError("initial data must be supported in |x| <= 2 R0")
    r = np.linalg.norm(solver.X, axis=-1)
    label = shell_index(r)
    label[np.max(np.abs(solver.X), axis=-1) > grid.L - sw] = -1
    n_labels = int(label.max()) + 1
    w1 = (1.0 + r * r) ** -1.0
    w3 = (1.0 + r * r) ** -3.0
    h3 = grid.h ** 3
    gx = np.gradient(u0, grid.h)
    du0 = math.sqrt(float(np.sum(u1 * u1 + gx[0] ** 2 + gx[1] ** 2 + gx[2] ** 2) * h3))
    dt = solver.dt

    acc1 = np.zeros(n_labels)
    acc3 = np.zeros(n_labels)
    prev = {}
    out_t, out_E, out_le, out_sh = [], [], [], []

    last = int(math.ceil(T / dt - 1e-9))

    def cb(n, t, up, uc, un):
        ut = (un - up) / (2.0 * dt)
        p1, p3 = _shell_sums(uc, ut, label, w1, w3, n_labels, grid.h)
        if prev:
            acc1[:] += 0.5 * dt * (prev["p1"] + p1)
            acc3[:] += 0.5 * dt * (prev["p3"] + p3)
        prev["p1"], prev["p3"] = p1, p3
        if n % sample_every == 0 or n == last:
            out_t.append(t)
            out_E.append(float(np.sum(ut * ut) * h3 + solver.gradient_energy(uc)))
            out_le.append(math.sqrt(acc1.max()) + math.sqrt(acc3.max()))
            out_sh.append(np.sqrt(acc1).copy())

    run(solver, u0, u1, T, record=False, callback=cb)
    le = np.asarray(out_le)
    return DecayReport(np.asarray(out_t), np.asarray(out_E), le, le / du0, np.asarray(out_sh), du0,
                       2.0 * R0, {"n": grid.n, "L": grid.L, "h": grid.h, "dt": dt, "sponge_width": sw})


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"GEOCTRL-CHECKPOINT\n"


def save_checkpoint(path, state: SolverState):
    """Header line (JSON) followed by u_prev and u_curr as raw float64."""
    header = {"shape": list(state.u_curr.shape), "n": state.grid.n, "L": state.grid.L,
              "h": state.grid.h, "t": state.t, "dt": state.dt, "cfl": state.cfl,
              "step_count": state.step_count, "dtype": "float64", "order": "C"}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(state.u_prev, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.u_curr, dtype="<f8").tobytes())


def load_checkpoint(path, solver: WaveSolver | None = None):
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError("not a checkpoint file")
        header = json.loads(fh.readline())
        shape = tuple(header["shape"])
        size = int(np.prod(shape))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != 2 * size:
        raise ValueError("checkpoint payload has the wrong size")
    grid = Grid(header["n"], header["L"])
    coeffs = solver.coeffs if solver is not None else None
    sponge = solver.sponge if solver is not None else None
    return SolverState(data[:size].reshape(shape).copy(), data[size:].reshape(shape).copy(),
                       header["t"], header["dt"], grid, coeffs, header["cfl"], sponge, header["step_count"])
