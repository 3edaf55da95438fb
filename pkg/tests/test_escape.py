from dataclasses import dataclass

import numpy as np
import pytest

from geoctrl import escape as esc
from geoctrl.errors import ChartFailure, NoControl, NoExit
from geoctrl.flow import rk4_flow
from geoctrl.geometry import (AnnularDamping, AnnulusDecomposition, ConstantDamping, DampingProfile, ZeroDamping)
from geoctrl.halfwave import PhasePoint, as_state, b_pm, project_states

CBAR2 = 0.3


@dataclass(frozen=True)
class TimeRamp(DampingProfile):
    stationary = False

    def _a(self, t, x):
        return np.broadcast_to(np.maximum(t, 0.0), np.broadcast_shapes(np.shape(t), x.shape[:-1])).copy()


@dataclass(frozen=True)
class SteepAnnulus(AnnularDamping):
    """Same profile as the default annulus with a much narrower transition."""
    width: float = 0.05


@pytest.fixture(scope="module")
def samples(trapped32):
    return trapped32[:4]


@pytest.fixture(scope="module")
def r0(photon, bump_damping, samples):
    return esc.r0_search(photon, bump_damping, samples, CBAR2)


@pytest.fixture(scope="module")
def triples(photon, bump_damping, samples, r0):
    return [esc.build_local_triple(photon, bump_damping, w, "plus", {"Cbar2": CBAR2, "r0": r0}) for w in samples]


@pytest.fixture(scope="module")
def combined(photon, bump_damping, triples):
    nt = esc.build_nontrapping(photon, AnnulusDecomposition(), 8.0, 1.5 * photon.R0, bump_damping)
    return esc.combine_and_correct(photon, bump_damping, triples, nt, 8.0)


# charts and r0 ------------------------------------------------------------------

def test_chart_identity_and_straight_lines(minkowski, photon, samples):
    w = as_state(samples[0])
    chart = esc.product_coords(photon, w, "plus", (-2.0, 10.0), 0.1)
    assert np.allclose(chart.forward(np.array([0.0]), w[None, 1:4], w[None, 5:8])[0], w)
    assert chart.round_trip_error() <= 1e-6
    base = np.array([0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    flat = esc.product_coords(minkowski, base, "plus", (-2.0, 5.0), 0.1)
    z = np.array([[1.0, 0.1, 0.0]])
    zeta = np.array([[0.0, 1.0, 0.0]])
    img = flat.forward(np.array([3.0]), z, zeta)[0]
    assert np.allclose(img, [3.0, 1.0, -2.9, 0.0, 1.0, 0.0, 1.0, 0.0], atol=1e-12)


def test_chart_failure_on_coarse_step(photon, samples):
    with pytest.raises(ChartFailure):
        esc.product_coords(photon, samples[0], "plus", (-2.0, 40.0), 0.3, step=2.0)


def test_oscillation_bound_at_r0(photon, bump_damping, samples, r0):
    Ts = esc.control_times(photon, bump_damping, samples, CBAR2)
    span = (-2.0, max(Ts) + 2.0)
    assert esc.damping_oscillation(photon, bump_damping, samples, 2.0 * r0, span) <= CBAR2 / 4


def test_r0_frozen_value(r0):
    assert r0 == pytest.approx(0.173828125)


def test_r0_constant_damping_cap(photon, samples):
    assert esc.r0_search(photon, ConstantDamping(level=0.5), samples[:2], CBAR2) == 0.5


def test_r0_shrinks_for_steeper_damping(photon, bump_damping, samples, r0):
    steep = esc.r0_search(photon, SteepAnnulus(), samples, CBAR2)
    assert steep < r0


# local triples ----------------------------------------------------------------

def test_ramp_triple_alpha_closed_form(minkowski):
    base = np.array([0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    tr = esc.build_local_triple(minkowski, TimeRamp(), base, "plus", {"Cbar2": 1.0, "r0": 0.1, "eps": 0.1})
    assert tr.T_omega == pytest.approx(2.0, abs=1e-6)
    s = np.linspace(0.0, 2.0, 101)
    assert np.allclose(tr.alpha(s), s - s ** 2 / 2 + 0.01, atol=1e-9)
    assert tr.alpha(np.array([2.0]))[0] == pytest.approx(0.01, abs=1e-9)


def test_zero_damping_has_no_control(minkowski):
    base = np.array([0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    with pytest.raises(NoControl):
        esc.build_local_triple(minkowski, ZeroDamping(), base, "plus", {"Cbar2": 1.0, "r0": 0.1})


def test_large_damping_triple(photon, samples):
    tr = esc.build_local_triple(photon, ConstantDamping(level=0.5), samples[0], "plus", {"Cbar2": CBAR2, "r0": 0.1})
    assert tr.kind == "large"
    res, dom, _ = esc.local_check(tr, photon, ConstantDamping(level=0.5), 2000)
    assert res >= 0.0 and dom <= 0.0


def test_alpha_ledger(triples):
    for tr in triples:
        assert tr.kind == "small"
        T, e, e1 = tr.T_omega, tr.eps, tr.eps1
        s = np.linspace(0.0, T, 1000)
        assert np.all(tr.alpha(s) >= e ** 2 - 1e-12)
        assert np.allclose(tr.alpha_d(s), tr.Cbar2 - tr.a_gamma(s), atol=1e-12)
        fd = np.gradient(tr.alpha(s), s)
        assert np.max(np.abs(fd[2:-2] - tr.alpha_d(s)[2:-2])) < 1e-4
        s1 = np.linspace(-e1, e1, 1000)
        assert np.all(tr.alpha_d(s1) >= tr.Cbar2 / 4)
        s2 = np.linspace(T, T + e, 1000)
        assert np.all(tr.alpha_d(s2) >= -tr.Cstar - 1e-12)


def test_domination_and_local_inequality(photon, bump_damping, triples):
    for i, tr in enumerate(triples):
        res, dom, _ = esc.local_check(tr, photon, bump_damping, 1000, seed=i)
        assert res >= -1e-8
        assert dom <= 0.0
        assert esc.verify_local_inequality(tr, photon, bump_damping, 1000, seed=i) >= -1e-8


def test_triple_support_discipline(triples, rng):
    tr = triples[0]
    lo, hi = tr.support
    s = np.concatenate([rng.uniform(lo - 5, lo, 50), rng.uniform(hi, hi + 5, 50)])
    z = np.repeat(tr.base[None, 1:4], 100, axis=0)
    zeta = np.repeat(tr.base[None, 5:8], 100, axis=0)
    ev = tr.evaluate(s, z, zeta)
    assert np.all(ev["q"] == 0) and np.all(ev["A"] == 0) and np.all(ev["r"] == 0)
    assert lo >= -2.0 and hi <= tr.T_omega + 2.0


# non-trapping pieces ----------------------------------------------------------

def test_q_out_minkowski(minkowski):
    nt = esc.build_nontrapping(minkowski, AnnulusDecomposition(), 8.0, 1.5)
    r = np.array([4.0, 7.0, 20.0])
    x = np.column_stack([r, 0 * r, 0 * r])
    xi = np.repeat([[1.0, 0.0, 0.0]], 3, axis=0)
    assert np.allclose(nt.q_out(x, xi), -nt.f(r))


def test_f_bounds(photon, bump_damping):
    sigma = 8.0
    nt = esc.build_nontrapping(photon, AnnulusDecomposition(), sigma, 1.5 * photon.R0, bump_damping)
    r = np.geomspace(photon.R0, 2.0 ** 10, 1000)          # annuli with a recorded c_j
    f, fd, cj = nt.f(r), nt.f_d(r), nt.cj_at(r)
    assert f[0] == pytest.approx(1.0)
    assert np.all(np.diff(f) >= 0) and np.all(np.isfinite(f))
    assert np.all(fd >= sigma / 2 * cj * f) and np.all(fd <= 8 * sigma * cj * f)


def test_q_out_flow_derivative(photon, bump_damping, rng):
    nt = esc.build_nontrapping(photon, AnnulusDecomposition(), 8.0, 1.5 * photon.R0, bump_damping)
    n = 500
    r = rng.uniform(2 * nt.R, 10 * nt.R, n)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    v = rng.normal(size=(n, 3))
    v[np.sum(v * d, axis=1) < 0] *= -1
    st = project_states(photon, np.column_stack([np.zeros(n), r[:, None] * d, np.zeros(n), -v]), "plus")
    h = 1e-3
    up, dn = rk4_flow(photon, st, "plus", h), rk4_flow(photon, st, "plus", -h)
    H = (nt.q_out(up[:, 1:4], up[:, 5:8]) - nt.q_out(dn[:, 1:4], dn[:, 5:8])) / (2 * h)
    assert np.all(H >= 1.0 * nt.cj_at(r))


def test_psi_integral_minkowski_closed_form(minkowski):
    # psi = chi_<R on Minkowski; a radial ray from the origin spends
    # int_0^inf chi_<R(s) ds = 1.5 R in the ball
    nt = esc.build_nontrapping(minkowski, AnnulusDecomposition(), 8.0, 1.5, step=0.01)
    val = nt.psi_integral(np.zeros((1, 3)), np.array([[-1.0, 0.0, 0.0]]))[0]
    assert val == pytest.approx(1.5 * 1.5, abs=1e-6)


def test_no_exit_without_trap_indicator(photon, samples):
    empty = esc.TrapIndicator(None, None)
    nt = esc.build_nontrapping(photon, AnnulusDecomposition(), 8.0, 1.5 * photon.R0, theta=empty, horizon=20.0)
    w = as_state(samples[0])
    with pytest.raises(NoExit):
        nt.psi_integral(w[None, 1:4], w[None, 5:8])


def test_trap_indicator(photon, minkowski, samples, bump_damping):
    assert esc.build_trap_indicator(minkowski).empty
    ind = esc.build_trap_indicator(photon, bump_damping)
    w = np.array([as_state(s) for s in samples])
    assert np.all(ind(photon, w[:, 1:4], w[:, 5:8]) == 1.0)
    assert np.all(ind.parked(photon, w[:, 1:4], w[:, 5:8]))
    with pytest.raises(ValueError):
        esc.build_trap_indicator(photon, esc_damping_outside())


def esc_damping_outside():
    return AnnularDamping(lo=4.0, hi=5.0)


def test_q_in_rate_matches_stencil(photon, bump_damping, rng):
    nt = esc.build_nontrapping(photon, AnnulusDecomposition(), 8.0, 1.5 * photon.R0, bump_damping)
    n = 20
    st = project_states(photon, np.column_stack([np.zeros(n), rng.uniform(-6, 6, (n, 3)), np.zeros(n),
                                                 rng.normal(size=(n, 3))]), "plus")
    st[:, 5:8] /= st[:, 4:5]
    st[:, 4] = 1.0
    h = 1e-3
    I0 = nt.psi_integral(st[:, 1:4], st[:, 5:8])
    up, dn = rk4_flow(photon, st, "plus", h, 1e-3), rk4_flow(photon, st, "plus", -h, 1e-3)
    fd = (nt.q_in(up[:, 1:4], up[:, 5:8]) - nt.q_in(dn[:, 1:4], dn[:, 5:8])) / (2 * h)
    assert np.allclose(nt.q_in_rate(st[:, 1:4], st[:, 5:8], I0), fd, atol=1e-5)


# combined symbol ------------------------------------------------------------------

def test_quadratic_and_vertex():
    E, F, G = esc._quadratic(1.0, 2.0, -1.0, 6.0, 0.5, 1.5)      # 2 t^2 - 2 t + 2
    assert np.allclose([E, F, G], [2.0, -2.0, 2.0])
    rng = np.random.default_rng(3)
    for _ in range(50):
        E, F, G = rng.normal(size=3)
        bp, bm = rng.uniform(0.5, 3), -rng.uniform(0.5, 3)
        mt = esc.vertex_correction(E, F, G, bp, bm)
        P0 = esc.discriminant(E, F, G, bp, bm, mt)
        for h in (-1e-1, -1e-2, 1e-2, 1e-1):
            assert esc.discriminant(E, F, G, bp, bm, mt + h) >= P0 - 1e-12


def test_master_identities(photon, bump_damping, combined):
    states = esc.master_samples(photon, {"n": 60, "seed": 4}, combined.triples)
    res = esc.master_terms(combined, states, kappa=20.0)
    for s in (1.0, -1.0):
        d = res[s]
        delta2 = (res["bplus"] - res["bminus"]) ** 2
        assert np.allclose(d["E"] - d["mtilde"], d["on_char"] / delta2, rtol=1e-6, atol=1e-10)
        disc = esc.discriminant(d["E"], d["F"], d["G"], res["bplus"], res["bminus"], d["mtilde"])
        assert np.allclose(disc, -4 * d["on_char"] * d["other_root"] / delta2, rtol=1e-6, atol=1e-10)
        assert np.allclose(res["m"][s], d["mtilde"], rtol=1e-12)         # g00 = -1
    on = states.copy()
    on[:, 4] = res["bplus"]
    r2 = esc.master_terms(combined, on, kappa=20.0)
    assert np.allclose(r2[1.0]["corrected"], r2[1.0]["raw"])


def test_q_high_frequency_homogeneous(combined, photon):
    states = esc.master_samples(photon, {"n": 40, "seed": 5}, combined.triples)
    q1 = combined.q_plus_gt1(states)
    scaled = states.copy()
    scaled[:, 4:] *= 3.0
    assert np.allclose(combined.q_plus_gt1(scaled), q1, rtol=1e-10, atol=1e-300)


def test_master_minkowski_constant_damping(minkowski):
    # a = 1 has infinite AF norm, so c_j come from the metric alone
    d = ConstantDamping(level=1.0)
    nt = esc.build_nontrapping(minkowski, AnnulusDecomposition(), 8.0, 1.5)
    ce = esc.combine_and_correct(minkowski, d, [], nt, 8.0)
    best, _, info = esc.verify_master_inequality(ce, minkowski, d, {"n": 300, "seed": 1})
    assert best > 0 and info["discriminant_negative"]
    ce.kappa = None
    best, _, info = esc.verify_master_inequality(ce, minkowski, d, {"n": 300, "seed": 2, "tau_range": (50, 100),
                                                                    "xi_range": (1, 2)})
    assert best > 0


def test_master_samples_respect_spec(photon, combined):
    st = esc.master_samples(photon, {"n": 400, "seed": 0}, combined.triples)
    k = np.linalg.norm(st[:, 5:8], axis=-1)
    assert np.all((k >= 1 - 1e-12) & (k <= 10 + 1e-12))
    assert np.all((np.abs(st[:, 4]) >= 1) & (np.abs(st[:, 4]) <= 10))
    assert np.all(np.linalg.norm(st[:, 1:4], axis=-1) <= 2 * photon.R0)


def test_calibrate_kappa():
    assert esc.calibrate_kappa(4.0, 8.0) == pytest.approx(1.1 * 4.0 * 4.0)
    assert esc.calibrate_kappa(0.2, 8.0) == pytest.approx(1.1 * 4.0)
