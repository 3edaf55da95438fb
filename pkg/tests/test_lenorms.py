import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from geoctrl.lenorms import (
    GridFunction, annulus_terms, gradient, l2l2_norm, le1_norm, le_norm, lestar_norm, norm_series_csv, shell_index,
)


def _grid(n=41, L=4.0, n_t=3, dt=0.5):
    h = 2 * L / (n - 1)
    ax = -L + h * np.arange(n)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.sqrt(X * X + Y * Y + Z * Z), h, n_t, dt


def test_shell_index():
    r = np.array([0.0, 0.5, 1.0, 1.01, 2.0, 2.5, 4.0, 4.1])
    assert shell_index(r).tolist() == [0, 0, 0, 1, 1, 2, 2, 3]


def test_zero_function_all_norms_zero():
    u = GridFunction(np.zeros((3, 9, 9, 9)), 2.0, 0.5, 0.1)
    assert le_norm(u) == 0 and lestar_norm(u) == 0 and l2l2_norm(u) == 0 and le1_norm(u) == 0


def test_indicator_of_annulus_matches_radial_integral():
    n, L = 161, 2.5
    r, h, _, _ = _grid(n, L)
    ind = ((r > 1.0) & (r <= 2.0)).astype(float)
    u = GridFunction(np.stack([ind, ind]), L, h, 1.0)        # t in [0, 1]
    exact = np.sqrt(quad(lambda s: 4 * np.pi * s * s / np.sqrt(1 + s * s), 1.0, 2.0)[0])
    assert le_norm(u) == pytest.approx(exact, rel=0.02)


def test_homogeneity_and_single_annulus_lestar():
    r, h, n_t, dt = _grid()
    bump = np.where((r > 1.2) & (r < 1.8), np.cos(np.pi * (r - 1.5) / 0.6) ** 2, 0.0)
    u = GridFunction(np.stack([bump] * n_t), 4.0, h, dt)
    assert le_norm(u.scaled(2.0)) == pytest.approx(2 * le_norm(u))
    labels, norms, _ = annulus_terms(u, 0.5)
    assert np.count_nonzero(norms) == 1
    assert lestar_norm(u) == pytest.approx(norms.max())


def test_two_annulus_lestar_is_sum():
    r, h, n_t, dt = _grid()
    a = np.where((r > 1.2) & (r < 1.8), 1.0, 0.0)
    b = np.where((r > 2.4) & (r < 3.6), 0.5, 0.0)
    mk = lambda f: GridFunction(np.stack([f] * n_t), 4.0, h, dt)
    assert lestar_norm(mk(a + b)) == pytest.approx(lestar_norm(mk(a)) + lestar_norm(mk(b)))


def test_truncation_flag():
    r, h, n_t, dt = _grid()
    labels, _, trunc = annulus_terms(GridFunction(np.ones((2,) + r.shape), 4.0, h, dt))
    assert labels.tolist() == [0, 1, 2, 3]
    assert trunc.tolist() == [False, False, False, True]


def test_le1_time_ramp_dominated_by_time_derivative():
    r, h, _, dt = _grid(n=33)
    ind = ((r > 1.0) & (r <= 2.0)).astype(float)
    t = dt * np.arange(5)
    u = GridFunction(t[:, None, None, None] * ind, 4.0, h, dt)
    du = gradient(u)
    # interior of the annulus: d_t u = 1, spatial parts vanish away from the edges
    ut = GridFunction(du.values[:, :1], 4.0, h, dt)
    assert le_norm(ut) == pytest.approx(le_norm(GridFunction(np.ones_like(t)[:, None, None, None] * ind, 4.0, h, dt)))
    assert le1_norm(u, du) == pytest.approx(le_norm(du) + le_norm(u, -1.5))
    assert le1_norm(u.scaled(3.0)) == pytest.approx(3 * le1_norm(u))


def test_refinement_second_order():
    def norm_at(n):
        L = 4.0
        h = 2 * L / (n - 1)
        ax = -L + h * np.arange(n)
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
        g = np.exp(-(X * X + Y * Y + Z * Z))
        return l2l2_norm(GridFunction(g[None], L, h, 1.0))
    exact = (np.pi / 2) ** 0.75
    e1, e2 = abs(norm_at(21) - exact), abs(norm_at(41) - exact)
    assert e2 < e1 and e2 < 1e-3


def test_bad_grid_function():
    with pytest.raises(ValueError):
        GridFunction(np.zeros((2, 3, 3, 3)), -1.0, 0.5, 0.1)
    with pytest.raises(ValueError):
        GridFunction(np.full((2, 3, 3, 3), np.nan), 1.0, 0.5, 0.1)
    with pytest.raises(ValueError):
        GridFunction(np.zeros((3, 3, 3)), 1.0, 0.5, 0.1)


def test_csv(tmp_path):
    p = tmp_path / "n.csv"
    norm_series_csv(p, [0.0, 1.0], [[1.0, 2.0], [3.0, 4.0]], [5.0, 6.0])
    assert p.read_text().splitlines()[0] == "t,le_shell0,le_shell1,energy"


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n_t=st.integers(1, 4))
def test_norm_orderings(seed, n_t):
    rng = np.random.default_rng(seed)
    n, L = 17, 4.0
    h = 2 * L / (n - 1)
    u = GridFunction(rng.normal(size=(n_t, n, n, n)), L, h, 0.3)
    assert le_norm(u) <= l2l2_norm(u) * (1 + 1e-12)
    assert l2l2_norm(u) <= lestar_norm(u) * (1 + 1e-12)
