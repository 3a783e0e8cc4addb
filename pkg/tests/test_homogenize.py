import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from volterralab import homogenize as hz
from volterralab import observables as ob
from volterralab import roughlift as rl
from volterralab import volterra as vt
from volterralab.errors import ConsistencyError, ExtrapolationError, GridError, ModelError, ParameterError

OU = vt.exp_ou(1.0, unit_variance=True)
COV = vt.covariance_model(OU)
H1, H2 = ob.hermite([1]), ob.hermite([2])
GRID = hz.uniform_grid(-math.pi - 0.5, 1.5 * math.pi + 0.5, 301)


def sin_h2():
    return hz.product_field([hz.Factor("sin")], H2, COV.sigma0)


# ---- spatial factors ----------------------------------------------------- #

@pytest.mark.parametrize("factor", [hz.Factor("sin", freq=1.3, phase=0.2, amp=0.7), hz.Factor("cos", freq=2.0),
                                    hz.Factor("poly", coeffs=(1.0, -2.0, 0.5, 0.25)), hz.Factor("bump", radius=1.0)])
def test_factor_derivatives_match_finite_differences(factor):
    x = np.linspace(-2.7, 2.7, 37)
    h = 1e-5
    for k in range(3):
        fd = (factor.deriv(x + h, k) - factor.deriv(x - h, k)) / (2 * h)
        assert np.allclose(factor.deriv(x, k + 1), fd, atol=2e-5)


def test_bump_shape():
    b = hz.Factor("bump", radius=2.0)
    assert np.all(b.deriv(np.array([-2.0, 0.0, 1.9])) == 1.0)
    assert np.all(b.deriv(np.array([-4.0, 4.0, 7.0])) == 0.0)
    # value and first two derivatives continuous at the joints
    for x0 in (2.0, 4.0):
        for k in range(3):
            assert b.deriv(x0 - 1e-9, k) == pytest.approx(b.deriv(x0 + 1e-9, k), abs=1e-6)


def test_product_leibniz():
    f = hz.FieldTerm(0, (hz.Factor("sin"), hz.Factor("poly", coeffs=(0.0, 1.0))), H1)
    x = np.linspace(-1, 1, 9)[:, None]
    # d^2/dx^2 (x sin x) = 2 cos x - x sin x
    ref = 2 * np.cos(x[:, 0]) - x[:, 0] * np.sin(x[:, 0])
    assert np.allclose(f.spatial(x, (2,)), ref, atol=1e-13)


# ---- condition check ----------------------------------------------------- #

def test_condition_check_examples():
    pts = np.linspace(-1, 4, 11)
    rep = hz.field_condition_check(sin_h2(), 1.0, 1.0, 2.0, pts, super_polynomial=True)
    assert rep["min_rank"] == 2 and rep["boundary"] and not rep["rank_condition"] and rep["passes"]
    assert rep["derivative_rank_monotone"]
    rep = hz.field_condition_check(hz.product_field([hz.Factor("sin")], H1, COV.sigma0), 1.0, 1.0, 2.0, pts)
    assert not rep["rank_condition"] and not rep["passes"]
    zero = hz.product_field([hz.Factor("const", amp=0.0)], H1, COV.sigma0)
    assert hz.field_condition_check(zero, 1.0, 1.0, 2.0, pts)["degenerate"]


def test_derivative_rank_monotone_flag():
    pts = np.linspace(-2, 2, 9)
    H3 = ob.hermite([3])
    # (2 + sin x) H2 + cos x H3: rank 2 everywhere, derivatives never drop below it
    good = hz.field_sum(hz.FieldTerm(0, (hz.Factor("sin"),), H2), hz.FieldTerm(0, (hz.Factor("const", amp=2.0),), H2),
                        hz.FieldTerm(0, (hz.Factor("cos"),), H3), sigma=COV.sigma0)
    rep = hz.field_condition_check(good, 1.0, 1.0, 2.0, pts)
    assert rep["derivative_rank_monotone"] and rep["min_rank"] == 2
    # sin x H2 + cos x H4 has rank 4 at x = 0 while its derivative has rank 2 there
    bad = hz.field_sum(hz.FieldTerm(0, (hz.Factor("sin"),), H2), hz.FieldTerm(0, (hz.Factor("cos"),), ob.hermite([4])),
                       sigma=COV.sigma0)
    rep = hz.field_condition_check(bad, 1.0, 1.0, 2.0, pts)
    assert not rep["derivative_rank_monotone"] and rep["min_rank"] == 2


# ---- fast-slow integration ----------------------------------------------- #

def fast_paths(n, eps, T, h, seed):
    steps = int(round(T / (eps * h)))
    grid = vt.PathGrid(0.0, steps * h, h, steps + 1)
    return vt.simulate_stationary(COV, grid, n, seed).paths


def test_zero_field_keeps_x0():
    f = hz.product_field([hz.Factor("const", amp=0.0)], H2, COV.sigma0)
    y = fast_paths(3, 0.01, 1.0, 0.1, 1)
    sp = hz.integrate_fast_slow(f, y, 0.1, 0.01, [0.7], 1.0)
    assert np.all(sp.x == 0.7)


def test_x_independent_reduces_to_scaled_path():
    eps, h = 1e-2, 0.05
    f = hz.product_field([hz.Factor("const", amp=1.0)], H2, COV.sigma0)
    y = fast_paths(5, eps, 1.0, h, 2)
    sp = hz.integrate_fast_slow(f, y, h, eps, [0.0], 1.0)
    ref = rl.scaled_path(H2(y)[..., None], h, eps, vt.PathGrid.span(0.0, 1.0, 1.0)).values[:, -1, 0]
    assert np.max(np.abs(sp.x[:, -1, 0] - ref)) <= 1e-6


def test_substep_richardson():
    eps, h = 1e-2, 0.05
    f = sin_h2()
    y = fast_paths(4, eps, 1.0, h, 3)
    a = hz.integrate_fast_slow(f, y, h, eps, [1.0], 1.0, substep=1.0).x[:, -1, 0]
    b = hz.integrate_fast_slow(f, y, h, eps, [1.0], 1.0, substep=0.5).x[:, -1, 0]
    c = hz.integrate_fast_slow(f, y, h, eps, [1.0], 1.0, substep=0.25).x[:, -1, 0]
    # second-order scheme on a piecewise-linear driver: errors shrink about four-fold
    assert np.max(np.abs(b - c)) <= 0.4 * np.max(np.abs(a - b)) + 1e-12


def test_integrator_guards():
    f = sin_h2()
    y = fast_paths(1, 0.1, 1.0, 0.1, 4)
    with pytest.raises(ParameterError):
        hz.integrate_fast_slow(f, y, 0.1, 0.1, [1.0], 1.0, substep=1.5)
    with pytest.raises(GridError):
        hz.integrate_fast_slow(f, y[:, :50], 0.1, 0.1, [1.0], 1.0)


def test_blow_up_guard():
    f = hz.product_field([hz.Factor("poly", coeffs=(0.0, 0.0, 1.0))], ob.constant(1.0), COV.sigma0)
    y = fast_paths(2, 0.1, 1.0, 0.1, 5)
    sp = hz.integrate_fast_slow(f, y, 0.1, 0.1, [5.0], 1.0)
    assert np.all(sp.blown_up) and np.all(np.isfinite(sp.x))


# ---- effective coefficients ---------------------------------------------- #

@pytest.fixture(scope="module")
def sin_model():
    return hz.effective_coefficients(sin_h2(), COV, GRID, 20.0)


def test_sin_h2_closed_form(sin_model):
    pts = GRID.points[:, 0]
    assert np.allclose(sin_model.gamma[:, 0], np.sin(pts) * np.cos(pts), atol=1e-6)
    assert np.allclose(np.diagonal(sin_model.sigma[:, :, 0, 0]), 2 * np.sin(pts) ** 2, atol=2e-6)


def test_product_field_formulas():
    G = ob.polynomial({(2,): 1.0, (1,): 0.5, (0,): -1.0}, 1)
    f = hz.product_field([hz.Factor("cos", freq=0.5)], G, COV.sigma0)
    grid = hz.uniform_grid(-2, 2, 21)
    m = hz.effective_coefficients(f, COV, grid, 20.0)
    h = np.cos(0.5 * grid.points[:, 0])
    dh = -0.5 * np.sin(0.5 * grid.points[:, 0])
    lam_g = m.lambda_g[0, 0]
    # Lambda_G = int (2 e^{-2r} + 0.25 e^{-r}) dr = 1.25
    assert lam_g == pytest.approx(1.25, abs=1e-5)
    assert np.allclose(m.sigma[:, :, 0, 0], np.outer(h, h) * 2 * lam_g, atol=1e-12)
    assert np.allclose(m.gamma[:, 0], dh * h * lam_g, atol=1e-12)


def test_sigma_invariants(sin_model):
    S = sin_model.sigma
    L = sin_model.lambda_field
    assert np.array_equal(S, np.transpose(S, (1, 0, 3, 2)))
    assert np.array_equal(S, L + np.transpose(L, (1, 0, 3, 2)))
    K = S.shape[0]
    w = np.linalg.eigvalsh(S[:, :, 0, 0].reshape(K, K))
    assert w.min() >= -1e-8 * np.trace(S[:, :, 0, 0])


def test_x_independent_gamma_vanishes():
    f = hz.product_field([hz.Factor("const", amp=2.0)], H1, COV.sigma0)
    m = hz.effective_coefficients(f, COV, hz.uniform_grid(-1, 1, 5), 20.0)
    assert np.all(m.gamma == 0)


def test_two_dimensional_field_invariants():
    f = hz.field_sum(hz.FieldTerm(0, (hz.Factor("sin", coord=0), hz.Factor("cos", coord=1)), H1),
                     hz.FieldTerm(1, (hz.Factor("cos", coord=0),), H2),
                     hz.FieldTerm(1, (hz.Factor("poly", coord=1, coeffs=(0.5, 0.2)),), H1), sigma=COV.sigma0, d=2)
    grid = hz.uniform_grid([-1, -1], [1, 1], [7, 7])
    m = hz.effective_coefficients(f, COV, grid, 20.0)
    S = m.sigma
    assert np.allclose(S, np.transpose(S, (1, 0, 3, 2)))
    K = S.shape[0]
    block = np.transpose(S, (0, 2, 1, 3)).reshape(2 * K, 2 * K)
    assert np.linalg.eigvalsh(block).min() >= -1e-8 * np.trace(block)
    # Gamma_0(x) = sum_i d_i f_0 * f_i Lambda: only i = 0 pairs (H1 with H1) and i = 1 via its H1 term
    x = grid.points
    h00 = np.sin(x[:, 0]) * np.cos(x[:, 1])
    d0 = np.cos(x[:, 0]) * np.cos(x[:, 1])
    d1 = -np.sin(x[:, 0]) * np.sin(x[:, 1])
    h1 = 0.5 + 0.2 * x[:, 1]
    assert np.allclose(m.gamma[:, 0], d0 * h00 + d1 * h1, atol=1e-5)


def test_monte_carlo_cross_validation():
    m = hz.effective_coefficients(sin_h2(), COV, hz.uniform_grid(-1, 2, 13), 10.0, mc_paths=60, mc_span=200.0,
                                  master_seed=3)
    assert m.consistency["max_z"] <= 5.0


def test_consistency_error_names_cell():
    # a zero tolerance turns any Monte Carlo noise into a reported disagreement
    with pytest.raises(ConsistencyError) as exc:
        hz.effective_coefficients(sin_h2(), COV, hz.uniform_grid(-1, 2, 7), 10.0, mc_paths=20, master_seed=4,
                                  threshold=1e-9)
    assert "quantity" in str(exc.value) and "'x'" in str(exc.value)


# ---- N-point motion ------------------------------------------------------ #

def test_pivoted_cholesky():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 3))
    C = A @ A.T
    L, dropped = hz.pivoted_cholesky(C)
    assert np.allclose(L @ L.T, C, atol=1e-10)
    assert dropped <= 1e-9 * np.trace(C)
    with pytest.raises(ModelError):
        hz.pivoted_cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))
    L, _ = hz.pivoted_cholesky(np.ones((3, 3)))
    assert np.array_equal(L[0], L[1]) and np.array_equal(L[1], L[2])


def const_model():
    f = hz.product_field([hz.Factor("const", amp=math.sqrt(0.5))], H1, COV.sigma0)
    return hz.effective_coefficients(f, COV, hz.uniform_grid(-10, 10, 41), 30.0)


def test_constant_sigma_gives_common_increments():
    m = const_model()
    assert np.allclose(m.sigma, m.sigma[0, 0, 0, 0])
    run = hz.kunita_npoint_euler(m, [[-1.0], [0.5], [2.0]], 1.0, 0.01, 30, 8, store_every=1)
    # every point receives the same increment; differences move only by rounding of x + inc
    diffs = run.x[:, :, 1:, 0] - run.x[:, :, :1, 0]
    assert np.max(np.abs(diffs - diffs[:, :1])) <= 64 * np.finfo(float).eps * np.max(np.abs(run.x))
    L, _ = hz.pivoted_cholesky(m.sigma_block(run.x[:, -1]))
    assert np.array_equal(L[:, 0], L[:, 1]) and np.array_equal(L[:, 1], L[:, 2])


def test_zero_sigma_is_deterministic_flow():
    f = sin_h2()
    m = hz.effective_coefficients(f, COV, GRID, 20.0)
    run = hz.kunita_npoint_euler(m, [[1.0]], 1.0, 1e-3, 3, 5, sigma_scale=0.0)
    ref = solve_ivp(lambda t, x: np.sin(x) * np.cos(x), (0, 1), [1.0], rtol=1e-10, atol=1e-12).y[0, -1]
    assert np.all(np.abs(run.x[:, -1, 0, 0] - ref) <= 5e-3)


def test_single_point_matches_ito_scheme(sin_model):
    run = hz.kunita_npoint_euler(sin_model, [[1.0]], 0.05, 1e-3, 4, 9)
    # one Euler step by hand for path 0 from the same stream
    from volterralab.seeding import STREAM_KUNITA, child_rng
    xi = child_rng(9, STREAM_KUNITA + 0).standard_normal((50, 1))
    x = 1.0
    for k in range(50):
        g = sin_model.gamma_at([[x]])[0, 0]
        s = sin_model.sigma_block(np.array([[[x]]]))[0, 0, 0]
        x = x + g * 1e-3 + math.sqrt(s) * math.sqrt(1e-3) * xi[k, 0]
    assert run.x[0, -1, 0, 0] == pytest.approx(x, abs=1e-12)


def test_same_seed_bit_identical(sin_model):
    a = hz.kunita_npoint_euler(sin_model, [[1.0], [1.5]], 0.2, 1e-2, 20, 11)
    b = hz.kunita_npoint_euler(sin_model, [[1.0], [1.5]], 0.2, 1e-2, 20, 11)
    assert np.array_equal(a.x, b.x)


def test_extrapolation_error():
    m = hz.effective_coefficients(sin_h2(), COV, hz.uniform_grid(0, 1, 11), 20.0)
    m.gamma_at([[1.05]])          # within one cell: clamped
    with pytest.raises(ExtrapolationError):
        m.gamma_at([[1.5]])


def test_npoint_marginal_matches_single_point(sin_model):
    three = hz.kunita_npoint_euler(sin_model, [[1.0], [1.3], [2.0]], 0.5, 5e-3, 600, 31).x[:, -1, 0, 0]
    one = hz.kunita_npoint_euler(sin_model, [[1.0]], 0.5, 5e-3, 600, 32).x[:, -1, 0, 0]
    assert hz.energy_distance(three, one, 200, 1)["pvalue"] >= 0.01


# ---- comparison ---------------------------------------------------------- #

def test_energy_distance_null_and_alternative():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2, 500))
    assert hz.energy_distance(a, b, 200, 2)["pvalue"] >= 0.01
    assert hz.energy_distance(a, b + 0.5, 200, 2)["pvalue"] <= 0.01
    x, y = rng.standard_normal((2, 300, 2))
    assert hz.energy_distance(x, y, 100, 3)["pvalue"] >= 0.01


def test_energy_distance_1d_matches_matrix_form():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal(40), rng.standard_normal(30) + 0.3
    e = hz.energy_distance(a, b, 2, 0)["energy"]
    ref = 2 * np.abs(a[:, None] - b[None]).mean() - np.abs(a[:, None] - a[None]).mean() \
        - np.abs(b[:, None] - b[None]).mean()
    assert e == pytest.approx(ref, rel=1e-12)


def test_limit_flow_compare_null():
    rng = np.random.default_rng(7)
    pool = rng.standard_normal((1000, 2))
    rep = hz.limit_flow_compare(pool[:500], pool[500:])
    assert rep["moments_ok"] and "cov_a" in rep
    for c in rep["coordinates"]:
        assert abs(c["mean_diff"]) <= 4 * c["mean_se"]
