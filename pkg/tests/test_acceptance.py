"""Acceptance suite: one test per numbered criterion, each printing a
PASS/FAIL line with its wall time."""
import time
from contextlib import contextmanager

import numpy as np
import pytest

from geoctrl import cli
from geoctrl import wavesim as W
from geoctrl.escape import escape_search
from geoctrl.flow import integrate_flow, radial_convexity, reparam_match, scaling_check
from geoctrl.gcc import first_control_time, path_integral, stationary_gcc_equiv, tgcc_check
from geoctrl.geometry import (
    AnnularDamping, AnnulusDecomposition, BallDamping, MinkowskiMetric, ZeroDamping, build_metric,
    photon_sphere_radii,
)
from geoctrl.halfwave import b_pm, principal_symbol, project_states
from geoctrl.lenorms import GridFunction, annulus_terms, l2l2_norm, le_norm, lestar_norm
from geoctrl.trapping import classify, classify_batch

from conftest import circular_seed

CBAR2 = 0.3


@contextmanager
def criterion(capsys, number, title, budget=None):
    t0 = time.perf_counter()
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - t0
        if budget is not None:
            assert elapsed < budget, f"runtime {elapsed:.1f} s over budget {budget} s"
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({elapsed:.1f} s)")


def _random_states(metric, n, rng, radius=6.0):
    st = np.zeros((n, 8))
    st[:, 0] = rng.uniform(0, 5, n)
    st[:, 1:4] = rng.uniform(-radius, radius, (n, 3))
    st[:, 4] = rng.uniform(-10, 10, n)
    st[:, 5:8] = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10, (n, 1))
    return st


def test_c01_halfwave_factorization(capsys):
    rng = np.random.default_rng(1)
    with criterion(capsys, 1, "half-wave factorization on 10^4 points per metric", budget=1.0):
        for name in ("minkowski", "photon-sphere", "drift"):
            m = build_metric(name)
            st = _random_states(m, 10_000, rng)
            x, tau, xi = st[:, 1:4], st[:, 4], st[:, 5:8]
            g00 = m.g_inv(x)[..., 0, 0]
            fact = g00 * (tau - b_pm(m, x, xi, "plus")) * (tau - b_pm(m, x, xi, "minus"))
            err = np.abs(principal_symbol(m, st) - fact) / (tau ** 2 + np.sum(xi ** 2, axis=-1))
            assert err.max() <= 1e-10, (name, err.max())


def test_c02_flow_conservation(capsys, photon, drift):
    rng = np.random.default_rng(2)
    with criterion(capsys, 2, "tau and p drift on 10^2 trajectories", budget=10.0):
        worst = 0.0
        for k in range(100):
            m = (photon, drift)[k % 2]
            y = np.concatenate([[0.0], rng.uniform(-4, 4, 3), [0.0], rng.normal(size=3)])
            w = project_states(m, y, ("plus", "minus")[(k // 2) % 2])
            traj = integrate_flow(m, w, "full_p", 100.0, tol=1e-9)
            ys = traj.states
            scale = w[4] ** 2 + np.sum(w[5:] ** 2)
            p = principal_symbol(m, ys)
            worst = max(worst, np.max(np.abs(ys[:, 4] - w[4])) / scale, np.max(np.abs(p - p[0])) / scale)
        assert worst <= 1e-7, worst


def test_c03_scaling_relations(capsys, photon, drift):
    with criterion(capsys, 3, "homogeneity residual for lambda in {0.5, 2, 5}"):
        for m in (photon, drift):
            for branch in ("plus", "minus"):
                w = project_states(m, np.array([0.0, 2.5, 0.4, -0.3, 0.0, 0.2, 1.0, 0.1]), branch)
                for lam in (0.5, 2.0, 5.0):
                    res = scaling_check(m, w, branch, lam, 20.0)
                    assert res <= 1e-6, (type(m).__name__, branch, lam, res)


def test_c04_reparameterization(capsys, photon, r_star):
    with criterion(capsys, 4, "reparameterized full flow matches the plus flow"):
        trapped = circular_seed(photon, r_star)
        escaping = project_states(photon, np.array([0, 7.0, 0, 0, 0, -1.0, 0.6, 0]), "plus")
        assert classify(photon, escaping, s_max=200.0).forward == "escaping"
        for w in (trapped, escaping):
            assert reparam_match(photon, w, 50.0) <= 1e-5


def test_c05_escape_convexity(capsys, photon, minkowski):
    rng = np.random.default_rng(5)
    with criterion(capsys, 5, "radial convexity outside R0"):
        R0 = photon.R0
        assert R0 == pytest.approx(photon.support_radius() + 1.0)
        checked = 0
        for _ in range(20):
            d = rng.normal(size=3)
            x = 7.0 * d / np.linalg.norm(d)
            w = project_states(photon, np.concatenate([[0.0], x, [0.0], rng.normal(size=3)]), "plus")
            traj = integrate_flow(photon, w, "plus", (-40.0, 40.0))
            vals = radial_convexity(traj, R0)
            checked += len(vals)
            assert all(v >= 0.1 for _, v in vals)
        assert checked > 100
        for _ in range(10):
            w = project_states(minkowski, np.concatenate([[0.0], rng.uniform(-3, 3, 3), [0.0],
                                                          rng.normal(size=3)]), "plus")
            traj = integrate_flow(minkowski, w, "plus", (-20.0, 20.0))
            assert all(abs(v - 2.0) <= 1e-8 for _, v in radial_convexity(traj, 1.0))


def test_c06_trapping_classification(capsys, photon, minkowski):
    rng = np.random.default_rng(6)
    with criterion(capsys, 6, "trapping classification and horizon monotonicity"):
        r_in = photon_sphere_radii(photon)[0]
        for branch in ("plus", "minus"):
            v = classify(photon, circular_seed(photon, r_in, branch), branch, s_max=1000.0)
            assert (v.forward, v.backward) == ("trapped", "trapped")
        for _ in range(10):
            w = project_states(minkowski, np.concatenate([[0.0], rng.uniform(-3, 3, 3), [0.0],
                                                          rng.normal(size=3)]), "plus")
            v = classify(minkowski, w, s_max=1000.0)
            assert (v.forward, v.backward) == ("escaping", "escaping")
        st = np.zeros((200, 8))
        st[:, 1:4] = rng.uniform(-3.5, 3.5, (200, 3))
        st[:, 5:8] = rng.normal(size=(200, 3))
        st = project_states(photon, st, "plus")
        short = classify_batch(photon, st, s_max=1000.0)
        long = classify_batch(photon, st, s_max=2000.0)
        for esc_short, esc_long in zip(short, long):
            assert 0 < esc_short.sum() < len(st)
            assert np.all(esc_long[esc_short])


def test_c07_tgcc_scenarios(capsys, photon, trapped32):
    with criterion(capsys, 7, "TGCC pass/fail scenarios and stationary equivalence", budget=60.0):
        samples = trapped32[:8]
        shifts = (0.0, 0.25, 0.5, 0.75)
        good = tgcc_check(photon, AnnularDamping(), samples, 20.0, 0.01, time_shifts=shifts)
        assert good.passed and good.Cbar_est >= 0.01
        bad = tgcc_check(photon, BallDamping(R=0.5), samples, 20.0, 0.01, time_shifts=shifts)
        assert not bad.passed and bad.Cbar_est == 0.0
        for d, expect in ((AnnularDamping(modulated=False), True), (BallDamping(R=0.5), False)):
            gcc_ok, hit_ok = stationary_gcc_equiv(photon, d, samples, 20.0)
            assert gcc_ok == hit_ok == expect


def test_c08_control_time_contract(capsys, photon, trapped32, minkowski):
    from test_gcc import TimeRamp
    with criterion(capsys, 8, "first control time contract on 32 samples"):
        d = AnnularDamping()
        for w in trapped32:
            traj = integrate_flow(photon, w, "plus", 60.0)
            T, a_at = first_control_time(traj, d, CBAR2)
            assert a_at >= CBAR2 - 1e-6
            f = lambda u: d.a(traj(u)[..., 0], traj(u)[..., 1:4])
            s = np.linspace(1e-3, T - 1e-6, 25)
            running = np.array([path_integral(f, 0.0, v) for v in s]) / s
            assert np.all(running < CBAR2)
        line = integrate_flow(minkowski, np.array([0, 1.0, 0, 0, 1.0, 0, 1.0, 0]), "plus", 10.0)
        T, _ = first_control_time(line, TimeRamp(), 1.0)
        assert abs(T - 2.0) <= 1e-6


@pytest.fixture(scope="module")
def escape_run(photon, trapped32):
    t0 = time.perf_counter()
    rep = escape_search(photon, AnnularDamping(), trapped32[:8], CBAR2, AnnulusDecomposition(),
                        {"n": 10_000, "seed": 0}, sigma0=8.0, local_samples=10_000)
    return rep, time.perf_counter() - t0


def test_c09_local_escape_inequality(capsys, escape_run):
    rep, _ = escape_run
    with criterion(capsys, 9, "local escape inequality and domination on every triple"):
        assert rep.n_triples == 8
        assert rep.local_min_residual >= -1e-8
        assert rep.local_max_domination <= 0.0


def test_c10_master_inequality(capsys, escape_run):
    rep, elapsed = escape_run
    with criterion(capsys, 10, f"master inequality search ({elapsed:.0f} s for the search)"):
        assert elapsed < 600.0
        assert rep.n_samples >= 10_000
        assert rep.min_residual > 0
        assert rep.discriminant_negative
        assert rep.passed


def _identity_defect(photon, n):
    grid = W.Grid(n, 6.0)
    solver = W.WaveSolver(photon, AnnularDamping(), grid)
    u0, u1 = W.gaussian_packet(grid)
    _, hist = W.run(solver, u0, u1, 3.0)
    E = hist.arrays()["E"]
    return abs(W.energy_identity_defect(hist)) / E[0]


def test_c11_energy_identity(capsys, photon):
    with criterion(capsys, 11, "discrete energy identity at 128^3, second-order defect"):
        t0 = time.perf_counter()
        fine = _identity_defect(photon, 128)
        assert time.perf_counter() - t0 < 300.0
        coarse = _identity_defect(photon, 64)
        assert fine <= 0.02
        assert coarse / fine >= 3.0, (coarse, fine)


def test_c12_decay_exhibit(capsys, photon):
    cfg = cli.DEFAULTS["decay"]
    with criterion(capsys, 12, "decay exhibit: damped plateau and undamped growth", budget=900.0):
        growth = {}
        for name, d in (("damped", AnnularDamping()), ("undamped", ZeroDamping())):
            rep = W.decay_experiment(photon, d, cfg["init"], cfg["T"], cfg["grid"], cfg["sample_every"])
            T_star = 4.0 * rep.crossing_time
            assert rep.t[-1] >= 2.0 * T_star - 1e-9
            growth[name] = rep.ratio_at(2.0 * T_star) / rep.ratio_at(T_star)
        with capsys.disabled():
            print(f"\n    ratio(2T*)/ratio(T*): damped {growth['damped']:.4f}, undamped {growth['undamped']:.4f}")
        assert growth["damped"] <= 1.05
        assert growth["undamped"] >= 1.15


def test_c13_norm_sanity(capsys):
    rng = np.random.default_rng(13)
    with criterion(capsys, 13, "LE <= L2L2 <= LE* on 10^2 random grid functions"):
        for k in range(100):
            n = int(rng.integers(8, 20))
            L = float(rng.uniform(1.5, 6.0))
            h = 2 * L / (n - 1)
            v = rng.normal(size=(int(rng.integers(1, 5)), n, n, n)) * rng.uniform(0.1, 10)
            u = GridFunction(v, L, h, float(rng.uniform(0.01, 0.5)))
            assert le_norm(u) <= l2l2_norm(u) * (1 + 1e-12)
            assert l2l2_norm(u) <= lestar_norm(u) * (1 + 1e-12)
            r = u.radius()
            j = int(rng.integers(0, 3))
            lo, hi = (0.0, 1.0) if j == 0 else (2.0 ** (j - 1), 2.0 ** j)
            single = GridFunction(np.where((r > lo) | (j == 0), 1.0, 0.0) * np.where(r <= hi, v, 0.0), L, h, u.dt)
            labels, norms, _ = annulus_terms(single, 0.5)
            assert np.count_nonzero(norms) <= 1
            assert l2l2_norm(single) <= lestar_norm(single) * (1 + 1e-12)
        zero = GridFunction(np.zeros((3, 9, 9, 9)), 2.0, 0.5, 0.1)
        assert le_norm(zero) == l2l2_norm(zero) == lestar_norm(zero) == 0.0
