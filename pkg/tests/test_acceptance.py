"""Acceptance criteria 1-13, one pass/fail line each."""

import hashlib
import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from volterralab import cli
from volterralab import hermite as hm
from volterralab import homogenize as hz
from volterralab import limits as lm
from volterralab import observables as ob
from volterralab import roughlift as rl
from volterralab import volterra as vt
from volterralab.quadrature import gauss_hermite_1d

OU = vt.exp_ou(1.0, unit_variance=True)
COV = vt.covariance_model(OU)
H1, H2 = ob.hermite([1]), ob.hermite([2])


def test_c01_hermite_orthogonality(criterion):
    t0 = time.perf_counter()
    x, w = gauss_hermite_1d(60)
    T = hm.hermite_table(10, x)
    G = (T * w) @ T.T
    err = float(np.max(np.abs(G - np.diag([math.factorial(m) for m in range(11)]))))
    dt = time.perf_counter() - t0
    assert criterion(1, err <= 1e-8 and dt < 1.0, f"max |<H_m,H_n> - delta m!| = {err:.2e} ({dt:.3f} s)")


def test_c02_generating_function(criterion):
    t0 = time.perf_counter()
    e = hm.expand(ob.generating_function([0.3]), np.eye(1), 8)
    err = max(abs(e.coeffs.get(hm.MultiIndex((l,)), 0.0) - 0.3**l / math.factorial(l)) for l in range(9))
    dt = time.perf_counter() - t0
    assert criterion(2, err <= 1e-6 and dt < 1.0, f"max |c_l - a^l/l!| = {err:.2e} ({dt:.3f} s)")


def test_c03_diagram_formula(criterion):
    t0 = time.perf_counter()
    rel = 0.0
    zmax = 0.0
    rng = np.random.default_rng(2024)
    n_mc = 1_000_000
    for rho in (-0.7, 0.0, 0.4):
        R = np.array([[1.0, rho], [rho, 1.0]])
        X = rng.standard_normal(n_mc)
        Y = rho * X + math.sqrt(1 - rho * rho) * rng.standard_normal(n_mc)
        TX, TY = hm.hermite_table(5, X), hm.hermite_table(5, Y)
        for m in range(6):
            exact = math.factorial(m) * rho**m
            v = hm.diagram_expectation((m, m), R)
            rel = max(rel, abs(v - exact) / abs(exact) if exact != 0 else abs(v))
            prod = TX[m] * TY[m]
            se = prod.std(ddof=1) / math.sqrt(n_mc)
            zmax = max(zmax, abs(prod.mean() - v) / se if se > 0 else 0.0)
    dt = time.perf_counter() - t0
    ok = rel <= 1e-12 and zmax <= 4 and dt < 10
    assert criterion(3, ok, f"max rel err {rel:.2e}, max MC z {zmax:.2f} ({dt:.1f} s)")


def test_c04_pairing_count_bound(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    checked = 0
    for N in range(1, 5):
        for ell in hm.multi_indices(N, 12):
            total = sum(g.multiplicity for g in hm.enumerate_pairings(ell))
            bound = math.sqrt(ell.factorial) * (N - 1) ** (ell.order / 2)
            checked += 1
            if total > 0:
                worst = max(worst, total / bound if bound > 0 else math.inf)
    dt = time.perf_counter() - t0
    ok = worst <= 1.0 and dt < 30
    assert criterion(4, ok, f"max count/bound {worst:.3f} over {checked} indices ({dt:.1f} s)")


def test_c05_chen_exactness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(50):
        count, N = int(rng.integers(20, 200)), int(rng.integers(1, 5))
        X = np.cumsum(rng.standard_normal((count, N)), axis=0)
        grid = vt.PathGrid(0.0, (count - 1) * 0.01, 0.01, count)
        lift = rl.lift_discrete(rl.ScaledFunctionalPath(1.0, grid, X))
        scale = float(np.max(np.abs(X - X[0]))) ** 2
        for _ in range(100):
            s, u, t = sorted(rng.integers(0, count, 3))
            worst = max(worst, float(np.max(np.abs(rl.chen_defect_idx(lift, s, u, t)))) / scale)
    dt = time.perf_counter() - t0
    assert criterion(5, worst <= 1e-12 and dt < 5, f"max relative Chen defect {worst:.2e} ({dt:.2f} s)")


def test_c06_limit_matrix_algebra(criterion):
    rng = np.random.default_rng(6)
    instances = [lm.from_lambda(rng.standard_normal((N, N))) for N in (1, 2, 3, 4) for _ in range(25)]
    exps = lm.expansions_for([H1, H2, ob.hermite([3])], COV.sigma0)
    instances.append(lm.chaos_limit_matrices(exps, COV, 20.0))
    ens = vt.simulate_stationary(COV, vt.PathGrid.span(0.0, 100.0, 0.05), 200, 61)
    mc2 = lm.limit_matrices(lm.lag_correlation([H1, H2], ens, exps[:2], COV, 400))
    instances.append(mc2)
    worst = {"upsilon2": 0.0, "xi": 0.0, "xi_antisym": 0.0, "upsilon_psd": 0.0, "square": 0.0}
    for L in instances:
        d = L.algebra_defects()
        for k in worst:
            worst[k] = min(worst[k], d[k]) if k == "upsilon_psd" else max(worst[k], d[k] - (L.clamp if k == "square" else 0))
    alg_ok = (worst["upsilon2"] <= 1e-12 and worst["xi"] <= 1e-12 and worst["xi_antisym"] <= 1e-12
              and worst["upsilon_psd"] >= -1e-12 and worst["square"] <= 1e-12)
    scalar = lm.limit_matrices(lm.mc_lag_correlation(ens, [H1], 400))
    z = abs(scalar.xi[0, 0]) / scalar.se["xi"][0, 0] if scalar.se["xi"][0, 0] > 0 else 0.0
    ok = alg_ok and z <= 4
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; scalar Xi z {z:.2f} ({len(instances)} instances)"
    assert criterion(6, ok, detail)


@pytest.fixture(scope="module")
def clt_ensemble():
    t0 = time.perf_counter()
    ens = lm.functional_ensemble(COV, [H1, H2], 1e-3, 1.0, 1.0, 0.05, 2000, 7)
    return ens, time.perf_counter() - t0


def test_c07_clt_benchmark(criterion, clt_ensemble):
    ens, dt = clt_ensemble
    parts = []
    ok = dt <= 300
    for k, name in enumerate(("H1", "H2")):
        x = ens.values[:, -1, k]
        v = float(np.mean(x * x))
        se = float(np.std(x * x, ddof=1)) / math.sqrt(len(x))
        p = float(stats.kstest(x, "norm", args=(0.0, math.sqrt(2.0))).pvalue)
        good = abs(v - 2.0) <= 0.2 and abs(v - 2.0) <= 4 * se and p >= 1e-3
        ok = ok and good
        parts.append(f"{name}: Var {v:.3f} (SE {se:.3f}) KS p {p:.3f}")
    assert criterion(7, ok, "; ".join(parts) + f" ({dt:.0f} s)")


def test_c08_ito_lift_drift(criterion):
    t0 = time.perf_counter()
    obs = [H1, H1, H2]
    ens = lm.functional_ensemble(COV, obs, 1e-2, 1.0, 1.0, 0.02, 2000, 8, with_lift=True)
    L = lm.chaos_limit_matrices(lm.expansions_for(obs, COV.sigma0), COV, 20.0)
    rep = lm.area_report(ens.area0[:, -1], 1.0, L.lam, L.xi)
    z = np.asarray(rep["z"])
    mean = np.asarray(rep["mean"])
    diag = [z[0, 0], z[1, 1], z[0, 1], z[1, 0]]          # the (H1, H1) block, target Lambda = 1
    cross = [z[0, 2], z[2, 0], z[1, 2], z[2, 1]]         # H1 against H2, target 0
    ok = max(abs(v) for v in diag) <= 4 and max(abs(v) for v in cross) <= 4
    dt = time.perf_counter() - t0
    detail = (f"(H1,H1) mean {mean[0, 0]:.4f} (z {z[0, 0]:+.2f}), max |z| block {max(abs(v) for v in diag):.2f}; "
              f"cross-chaos max |z| {max(abs(v) for v in cross):.2f} ({dt:.0f} s)")
    assert criterion(8, ok, detail)


def test_c09_conditional_decay(criterion):
    r = hm.conditional_decay_integral(hm.expand(H1, np.eye(1), 8), OU)
    worst = 0.0
    for k in (OU, vt.fbm_increment(0.3), vt.fbm_increment(0.7, mixing=np.array([[1.0, 0.0], [0.5, 1.0]]))):
        th = hm.fitted_theta_hat(k)
        for ell in hm.multi_indices(k.n, 6):
            for gap in (0.0, 0.25, 1.0, 3.0, 10.0, 50.0):
                b = hm.conditional_norm_bound(ell, gap, k, th)
                v = hm.conditional_hermite_norm(ell, gap, k)
                worst = max(worst, v / b if b > 0 else (math.inf if v > 0 else 0.0))
    ok = abs(r.value - 1.0) <= 1e-6 and r.finite and worst <= 1 + 1e-9
    assert criterion(9, ok, f"integral {r.value:.9f}, max norm/bound {worst:.4f}")


def test_c10_x_independent_reduction(criterion):
    t0 = time.perf_counter()
    eps, h = 1e-2, 0.05
    f = hz.product_field([hz.Factor("const", amp=1.0)], H2, COV.sigma0)
    steps = int(round(1.0 / (eps * h)))
    y = vt.simulate_stationary(COV, vt.PathGrid(0.0, steps * h, h, steps + 1), 20, 10).paths
    sp = hz.integrate_fast_slow(f, y, h, eps, [0.0], 1.0)
    ref = rl.scaled_path(H2(y)[..., None], h, eps, vt.PathGrid.span(0.0, 1.0, 1.0)).values[:, -1, 0]
    err = float(np.max(np.abs(sp.x[:, -1, 0] - ref)))
    dt = time.perf_counter() - t0
    assert criterion(10, err <= 1e-6 and dt < 30, f"max |x_T - scaled_path| = {err:.2e} ({dt:.2f} s)")


def test_c11_homogenization_benchmark(criterion):
    t0 = time.perf_counter()
    field = hz.product_field([hz.Factor("sin")], H2, COV.sigma0)
    model = hz.effective_coefficients(field, COV, hz.uniform_grid(-math.pi - 0.5, 1.5 * math.pi + 0.5, 301), 20.0)
    lim = hz.kunita_npoint_euler(model, [[1.0]], 1.0, 1e-3, 2000, 112).x[:, -1, 0, :]
    reps = {}
    for k, eps in enumerate((1e-1, 1e-3)):
        sp = hz.fast_slow_ensemble(field, COV, eps, 1.0, [1.0], 0.05, 2000, 120 + k)
        reps[eps] = hz.limit_flow_compare(sp.x[:, -1, :], lim, seed=11, bias=0.05)
    small, big = reps[1e-3], reps[1e-1]
    c = small["coordinates"][0]
    es, eb = small["energy"], big["energy"]
    se = math.hypot(es["null_sd"], eb["null_sd"])
    trend = es["energy"] <= eb["energy"] + 2 * se
    dt = time.perf_counter() - t0
    ok = small["moments_ok"] and trend and dt <= 900
    detail = (f"eps=1e-3 mean {c['mean_a']:.3f} vs {c['mean_b']:.3f} (SE {c['mean_se']:.3f}), "
              f"var {c['var_a']:.3f} vs {c['var_b']:.3f} (SE {c['var_se']:.3f}); "
              f"energy {es['energy']:.4f} vs {eb['energy']:.4f} at eps=0.1 (2 SE {2 * se:.4f}) ({dt:.0f} s)")
    assert criterion(11, ok, detail)


def test_c12_npoint_sanity(criterion):
    const = hz.product_field([hz.Factor("const", amp=math.sqrt(0.5))], H1, COV.sigma0)
    cm = hz.effective_coefficients(const, COV, hz.uniform_grid(-10, 10, 41), 30.0)
    run = hz.kunita_npoint_euler(cm, [[-1.0], [0.5], [2.0]], 1.0, 0.01, 200, 12, store_every=1)
    L, _ = hz.pivoted_cholesky(cm.sigma_block(run.x[:, -1]))
    same_rows = bool(np.array_equal(L[:, 0], L[:, 1]) and np.array_equal(L[:, 1], L[:, 2]))
    diffs = run.x[:, :, 1:, 0] - run.x[:, :, :1, 0]
    drift = float(np.max(np.abs(diffs - diffs[:, :1])))
    ulp_budget = 64 * np.finfo(float).eps * float(np.max(np.abs(run.x)))

    field = hz.product_field([hz.Factor("sin")], H2, COV.sigma0)
    model = hz.effective_coefficients(field, COV, hz.uniform_grid(-math.pi - 0.5, 1.5 * math.pi + 0.5, 301), 20.0)
    three = hz.kunita_npoint_euler(model, [[1.0], [1.3], [2.0]], 1.0, 1e-3, 1000, 121).x[:, -1, 0, 0]
    one = hz.kunita_npoint_euler(model, [[1.0]], 1.0, 1e-3, 1000, 122).x[:, -1, 0, 0]
    p = hz.energy_distance(three, one, 200, 12)["pvalue"]
    ok = same_rows and drift <= ulp_budget and p >= 0.01
    detail = (f"identical increments {same_rows}, difference drift {drift:.1e} (rounding budget {ulp_budget:.1e}); "
              f"marginal energy p {p:.3f}")
    assert criterion(12, ok, detail)


def test_c13_determinism(criterion, tmp_path):
    from test_cli import CONFIGS
    mismatched = []
    files = 0
    for kind, cfg in sorted(CONFIGS.items()):
        p = tmp_path / f"{kind}.json"
        p.write_text(json.dumps(cfg))
        digests = []
        for threads in (1, 8, 1):
            out = tmp_path / f"{kind}_{threads}_{len(digests)}"
            cli.main(["--config", str(p), "--out", str(out), "--threads", str(threads)])
            digests.append({f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in sorted(out.glob("*.csv"))})
        files += len(digests[0])
        if not (digests[0] == digests[1] == digests[2]) or not digests[0]:
            mismatched.append(kind)
    ok = not mismatched
    assert criterion(13, ok, f"{files} CSV files over {len(CONFIGS)} run kinds byte-identical at threads 1, 8 and rerun"
                             + (f"; mismatched {mismatched}" if mismatched else ""))
