import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volterralab import limits as lm
from volterralab import observables as ob
from volterralab import volterra as vt

OU = vt.exp_ou(1.0, unit_variance=True)
COV = vt.covariance_model(OU)
H1, H2 = ob.hermite([1]), ob.hermite([2])


@pytest.fixture(scope="module")
def ou_ensemble():
    return vt.simulate_stationary(COV, vt.PathGrid.span(0.0, 100.0, 0.05), 200, 21)


def test_chaos_lag_correlation_closed_forms():
    exps = lm.expansions_for([H1, H2], COV.sigma0)
    r = np.linspace(0, 5, 11)
    rho = lm.chaos_lag_correlation(exps, COV, r)
    assert np.allclose(rho[:, 0, 0], np.exp(-r), atol=1e-12)
    assert np.allclose(rho[:, 1, 1], 2 * np.exp(-2 * r), atol=1e-12)
    assert np.all(np.abs(rho[:, 0, 1]) <= 1e-14) and np.all(np.abs(rho[:, 1, 0]) <= 1e-14)


def test_estimators_agree(ou_ensemble):
    exps = lm.expansions_for([H1, H2], COV.sigma0)
    lc = lm.lag_correlation([H1, H2], ou_ensemble, exps, COV, 100)
    assert lc.agree, lc.max_z


def test_lag_beyond_span(ou_ensemble):
    with pytest.raises(Exception):
        lm.mc_lag_correlation(ou_ensemble, [H1], ou_ensemble.grid.count)


@pytest.mark.parametrize("G", [H1, H2])
def test_limit_matrices_scalar(G):
    L = lm.chaos_limit_matrices(lm.expansions_for([G], COV.sigma0), COV, 30.0)
    assert L.lam[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert L.upsilon2[0, 0] == pytest.approx(2.0, abs=2e-6)
    assert L.xi[0, 0] == 0.0


def test_short_horizon_warns():
    with pytest.warns(RuntimeWarning):
        lm.chaos_limit_matrices(lm.expansions_for([H1], COV.sigma0), COV, 2.0, dr=0.01)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_algebra_on_random_instances(N, seed):
    lam = np.random.default_rng(seed).standard_normal((N, N))
    L = lm.from_lambda(lam)
    d = L.algebra_defects()
    assert d["upsilon2"] == 0.0 and d["xi"] == 0.0 and d["xi_antisym"] == 0.0
    assert d["upsilon_psd"] >= -1e-12
    if L.clamp == 0:
        assert d["square"] <= 1e-12


def test_algebra_with_mc_se(ou_ensemble):
    exps = lm.expansions_for([H1, H2], COV.sigma0)
    L = lm.limit_matrices(lm.lag_correlation([H1, H2], ou_ensemble, exps, COV, 400))
    assert L.algebra_ok()
    assert np.all(np.abs(L.xi) <= 4 * np.asarray(L.se["xi"]) + 1e-15)
    Ls = lm.limit_matrices(lm.mc_lag_correlation(ou_ensemble, [H1], 400))
    assert abs(Ls.xi[0, 0]) <= 4 * Ls.se["xi"][0, 0] + 1e-15


def test_clt_report_degenerate_and_flags():
    X = np.zeros((50, 3, 1))
    rep = lm.clt_report(X, [0.0, 0.5, 1.0], np.zeros((1, 1)))
    assert rep["degenerate"] and rep["pass"]
    flags = lm.regime_flags([2], 0.4)
    assert not flags["nominal"]["clt"] and not flags["effective"]["clt"]
    flags = lm.regime_flags([2], 1.0, super_polynomial=True)
    assert flags["nominal"]["clt"] and not flags["nominal"]["rough"] and flags["effective"]["rough"]


def test_area_report_scalar_antisymmetric_zero():
    ens = lm.functional_ensemble(COV, [H1], 0.01, 1.0, 0.5, 0.05, 100, 3, with_lift=True)
    rep = lm.area_report(ens.area0[:, -1], 1.0, np.ones((1, 1)), np.zeros((1, 1)))
    assert rep["anti_mean"] == [[0.0]]


def test_area_cross_chaos_off_diagonal():
    ens = lm.functional_ensemble(COV, [H1, H2], 0.01, 1.0, 0.5, 0.05, 400, 4, with_lift=True)
    L = lm.chaos_limit_matrices(lm.expansions_for([H1, H2], COV.sigma0), COV, 20.0)
    rep = lm.area_report(ens.area0[:, -1], 1.0, L.lam, L.xi)
    z = np.asarray(rep["z"])
    assert abs(z[0, 1]) <= 4 and abs(z[1, 0]) <= 4


def test_functional_ensemble_chunk_and_thread_invariance():
    a = lm.functional_ensemble(COV, [H1], 0.05, 1.0, 0.25, 0.05, 70, 9, with_lift=True)
    b = lm.functional_ensemble(COV, [H1], 0.05, 1.0, 0.25, 0.05, 70, 9, with_lift=True, chunk=16, threads=4)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.area0, b.area0)


def test_clt_variance_trend():
    devs, ses = [], []
    for eps in (1e-1, 1e-2, 1e-3):
        ens = lm.functional_ensemble(COV, [H1], eps, 1.0, 1.0, 0.05, 1000, 17)
        x = ens.values[:, -1, 0]
        v = float(np.mean(x * x))
        devs.append(abs(v - 2.0))
        ses.append(float(np.std(x * x, ddof=1)) / math.sqrt(len(x)))
    for k in range(2):
        assert devs[k + 1] <= devs[k] + 2 * math.hypot(ses[k], ses[k + 1])


def test_moment_scaling_has_no_eps_trend():
    p = 4
    ratios = []
    epss = (1e-1, 1e-2, 1e-3)
    for eps in epss:
        ens = lm.functional_ensemble(COV, [H1], eps, 1.0, 0.25, 0.05, 500, 23)
        X = ens.values[:, :, 0]
        t = ens.out_grid.times
        best = 0.0
        for i in range(len(t)):
            for j in range(i + 1, len(t)):
                m = np.mean(np.abs(X[:, j] - X[:, i]) ** p) ** (1 / p)
                best = max(best, m / math.sqrt(t[j] - t[i]))
        ratios.append(best)
    slope = np.polyfit(np.log(epss), np.log(ratios), 1)[0]
    assert abs(slope) <= 0.1
