"""Limits of scaled additive functionals: the matrices Lambda, Upsilon^2, Xi
and empirical CLT / area reports.

``Lambda_ij = int_0^inf E[G_i(y_0) G_j(y_r)] dr`` is the only integrated
object; ``Upsilon^2 = Lambda + Lambda^T`` and ``Xi = (Lambda - Lambda^T)/2``
are derived from it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import GridError, ParameterError
from .hermite import (HermiteExpansion, chaos_cross_correlation, expand, normalize_covariance, rank)
from .roughlift import lift_discrete, scaled_path
from .seeding import STREAM_DIRECTIONS, child_rng
from .volterra import CovarianceModel, GaussianEnsemble, PathGrid, simulate_stationary


# --------------------------------------------------------------------------- #
# ensembles of functionals
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class FunctionalEnsemble:
    """``X^eps`` on ``out_grid`` for many paths (``values``: P x count x N);
    ``area0`` holds left-point areas built on the fast grid and subsampled."""

    epsilon: float
    out_grid: PathGrid
    fast_step: float
    values: np.ndarray
    area0: Optional[np.ndarray]
    master_seed: int
    labels: tuple = ()


def _eval_observables(observables, y):
    return np.stack([np.asarray(G(y), dtype=float) for G in observables], axis=-1)


def functional_ensemble(cov: CovarianceModel, observables: Sequence, epsilon: float, T: float,
                        out_step: float, fast_step: float, n_paths: int, master_seed: int,
                        with_lift: bool = False, threads: int = 1, chunk: int = 64,
                        first_path: int = 0) -> FunctionalEnsemble:
    """Simulate ``y`` on ``[0, T/eps]`` with step ``fast_step`` and integrate
    each observable into ``X^eps`` on the slow grid ``[0, T]`` with
    ``out_step``.

    Paths are produced in chunks so memory stays bounded; the realisation of
    path ``i`` depends only on ``(master_seed, i)``.
    """
    out_grid = PathGrid.span(0.0, T, out_step)
    stride = round(out_step / (epsilon * fast_step))
    if stride < 1 or abs(stride * epsilon * fast_step - out_step) > 1e-9 * out_step:
        raise GridError("out_step / eps must be a multiple of fast_step")
    fast_count = (out_grid.count - 1) * stride + 1
    fast_grid = PathGrid(0.0, (fast_count - 1) * fast_step, fast_step, fast_count)
    N = len(observables)
    values = np.empty((n_paths, out_grid.count, N))
    areas = np.empty((n_paths, out_grid.count, N, N)) if with_lift else None
    eps_fast = PathGrid(0.0, (fast_count - 1) * epsilon * fast_step, epsilon * fast_step, fast_count)
    for start in range(0, n_paths, chunk):
        stop = min(start + chunk, n_paths)
        ens = simulate_stationary(cov, fast_grid, stop - start, master_seed,
                                  first_path=first_path + start, threads=threads)
        g = _eval_observables(observables, ens.paths)
        if with_lift:
            fine = scaled_path(g, fast_step, epsilon, eps_fast)
            lift = lift_discrete(fine).subsample(stride)
            values[start:stop] = lift.base.values
            areas[start:stop] = lift.area0
        else:
            values[start:stop] = scaled_path(g, fast_step, epsilon, out_grid).values
    labels = tuple(getattr(G, "label", f"G{k}") for k, G in enumerate(observables))
    return FunctionalEnsemble(float(epsilon), out_grid, fast_step, values, areas, master_seed, labels)


# --------------------------------------------------------------------------- #
# lag correlations
# --------------------------------------------------------------------------- #

@dataclass
class LagCorrelation:
    """``rho[k, i, j] = E[G_i(y_0) G_j(y_{r_k})]`` with estimator details.

    ``per_path`` keeps the path-wise time averages (P x L x N x N) so any
    linear functional of rho gets an honest standard error.
    """

    r_grid: np.ndarray
    rho: np.ndarray
    se: np.ndarray
    per_path: Optional[np.ndarray] = None
    chaos: Optional[np.ndarray] = None
    max_z: Optional[float] = None
    agree: Optional[bool] = None


def _time_averaged_cross(a, b, max_lag):
    """Per-path ``mean_t a_t b_{t+k}`` for k = 0..max_lag via FFT.

    a, b: (P, M). Returns (P, max_lag + 1).
    """
    P, M = a.shape
    L = 1 << int(math.ceil(math.log2(2 * M)))
    fa = np.fft.rfft(a, L, axis=1)
    fb = np.fft.rfft(b, L, axis=1)
    cc = np.fft.irfft(np.conj(fa) * fb, L, axis=1)[:, : max_lag + 1]
    return cc / (M - np.arange(max_lag + 1))[None, :]


def mc_lag_correlation(ensemble: GaussianEnsemble, observables, max_lag_steps: int) -> LagCorrelation:
    """Monte Carlo estimator: average over paths and time shifts."""
    M = ensemble.grid.count
    if max_lag_steps >= M:
        raise GridError("lag beyond simulated span")
    g = _eval_observables(observables, ensemble.paths)  # P x M x N
    P, _, N = g.shape
    per = np.empty((P, max_lag_steps + 1, N, N))
    for i in range(N):
        for j in range(N):
            per[:, :, i, j] = _time_averaged_cross(g[:, :, i], g[:, :, j], max_lag_steps)
    rho = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / math.sqrt(P) if P > 1 else np.full(rho.shape, np.inf)
    r = ensemble.grid.step * np.arange(max_lag_steps + 1)
    return LagCorrelation(r, rho, se, per)


def normalized_lag_matrices(cov: CovarianceModel, r_grid, normalizer=None):
    """``C(r) = E[z_0 (x) z_r]`` with ``z = D^{-1/2} O^T y``."""
    norm = normalize_covariance(cov.sigma0) if normalizer is None else normalizer
    A = norm.inverse_map
    return np.einsum("ab,lbc,dc->lad", A, cov(np.asarray(r_grid, dtype=float)), A)


def chaos_lag_correlation(expansions: Sequence[HermiteExpansion], cov: CovarianceModel, r_grid,
                          tol: Optional[float] = None) -> np.ndarray:
    """Chaos-analytic estimator ``sum c_l^i c_k^j E[H_l(z_0) H_k(z_r)]``."""
    r_grid = np.asarray(r_grid, dtype=float)
    C = normalized_lag_matrices(cov, r_grid, expansions[0].normalizer)
    N = len(expansions)
    out = np.zeros((r_grid.size, N, N))
    for i, ei in enumerate(expansions):
        for j, ej in enumerate(expansions):
            t = min(ei.coeff_tol, ej.coeff_tol) if tol is None else tol
            out[:, i, j] = chaos_cross_correlation(ei, ej, C, t)
    return out


def lag_correlation(observables, ensemble: GaussianEnsemble, expansions, cov: CovarianceModel,
                    max_lag_steps: int, threshold: float = 4.0) -> LagCorrelation:
    """Both estimators side by side with the worst z-score."""
    mc = mc_lag_correlation(ensemble, observables, max_lag_steps)
    ch = chaos_lag_correlation(expansions, cov, mc.r_grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(mc.se > 0, (mc.rho - ch) / mc.se, np.where(np.abs(mc.rho - ch) > 1e-12, np.inf, 0.0))
    mc.chaos = ch
    mc.max_z = float(np.max(np.abs(z)))
    mc.agree = mc.max_z <= threshold
    return mc


# --------------------------------------------------------------------------- #
# limit matrices
# --------------------------------------------------------------------------- #

@dataclass
class LimitMatrices:
    lam: np.ndarray
    upsilon2: np.ndarray
    xi: np.ndarray
    upsilon: np.ndarray
    horizon: float
    se: Optional[dict] = None
    tail_bound: float = 0.0
    clamp: float = 0.0

    @property
    def N(self) -> int:
        return self.lam.shape[0]

    def algebra_defects(self) -> dict:
        """Residuals of the defining identities (all exactly zero or O(ulp))."""
        L = self.lam
        scale = max(float(np.max(np.abs(self.upsilon2))), 1e-300)
        w = np.linalg.eigvalsh(self.upsilon)
        return {
            "upsilon2": float(np.max(np.abs(self.upsilon2 - (L + L.T)))),
            "xi": float(np.max(np.abs(self.xi - 0.5 * (L - L.T)))),
            "xi_antisym": float(np.max(np.abs(self.xi + self.xi.T))),
            "upsilon_psd": float(min(w.min(), 0.0)),
            "square": float(np.max(np.abs(self.upsilon @ self.upsilon - self.upsilon2))) / scale,
        }

    def algebra_ok(self, tol: float = 1e-12) -> bool:
        d = self.algebra_defects()
        return (d["upsilon2"] == 0 and d["xi"] == 0 and d["xi_antisym"] == 0
                and d["upsilon_psd"] >= -tol and d["square"] <= tol + self.clamp)


def from_lambda(lam, horizon: float = math.inf, se=None, tail_bound: float = 0.0) -> LimitMatrices:
    """Derive Upsilon^2, Xi and the PSD root Upsilon from Lambda."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    u2 = lam + lam.T
    xi = 0.5 * (lam - lam.T)
    w, v = np.linalg.eigh(u2)
    clamp = float(max(-w.min(), 0.0)) if w.size else 0.0
    root = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    root = 0.5 * (root + root.T)
    return LimitMatrices(lam, u2, xi, root, horizon, se, tail_bound,
                         clamp / max(float(np.max(np.abs(u2))), 1e-300))


def _trapz(y, x, axis=0):
    return np.trapezoid(y, x, axis=axis)


def limit_matrices(rho: LagCorrelation | np.ndarray, r_grid=None, tail_bound: float = 0.0,
                   corr_time_tol: float = 5.0) -> LimitMatrices:
    """Lambda by the trapezoid rule on ``[0, horizon]``.

    ``tail_bound`` bounds the neglected integral beyond the horizon and is
    reported, not added. Per-path lag averages (when available) give the
    standard errors of Lambda, Upsilon^2 and Xi.
    """
    if isinstance(rho, LagCorrelation):
        r = rho.r_grid
        table = rho.rho
        per = rho.per_path
    else:
        r = np.asarray(r_grid, dtype=float)
        table = np.asarray(rho, dtype=float)
        per = None
    if table.ndim == 1:
        table = table[:, None, None]
    lam = _trapz(table, r)
    horizon = float(r[-1])
    diag0 = np.abs(np.diagonal(table[0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        tc = np.where(diag0 > 0, _trapz(np.abs(np.diagonal(table, axis1=1, axis2=2)), r) / diag0, 0.0)
    if np.any(horizon < corr_time_tol * tc):
        warnings.warn(f"horizon {horizon} shorter than {corr_time_tol} correlation times", RuntimeWarning,
                      stacklevel=2)
    se = None
    if per is not None and per.shape[0] > 1:
        lam_p = _trapz(per, r, axis=1)
        P = per.shape[0]
        se = {
            "lambda": lam_p.std(axis=0, ddof=1) / math.sqrt(P),
            "upsilon2": (lam_p + np.swapaxes(lam_p, 1, 2)).std(axis=0, ddof=1) / math.sqrt(P),
            "xi": (0.5 * (lam_p - np.swapaxes(lam_p, 1, 2))).std(axis=0, ddof=1) / math.sqrt(P),
        }
    return from_lambda(lam, horizon, se, tail_bound)


def chaos_limit_matrices(expansions, cov: CovarianceModel, horizon: float, dr: float = 1e-3,
                         tail_bound: float = 0.0) -> LimitMatrices:
    """Lambda from the chaos-analytic lag correlation on a fine grid."""
    m = int(round(horizon / dr))
    r = dr * np.arange(m + 1)
    return limit_matrices(chaos_lag_correlation(expansions, cov, r), r, tail_bound)


# --------------------------------------------------------------------------- #
# reports
# --------------------------------------------------------------------------- #

def regime_flags(ranks, beta: float, super_polynomial: bool = False) -> dict:
    """Rank conditions ``min rank > 1/beta`` and ``> 2/beta``.

    For kernels with super-polynomial decay every beta is admissible and the
    effective flags use beta = inf; the nominal ones are kept alongside.
    """
    r = min(ranks) if len(ranks) else math.inf
    nominal = {"clt": bool(r * beta > 1), "rough": bool(r * beta > 2)}
    eff = {"clt": True, "rough": True} if super_polynomial and r >= 1 else nominal
    return {"min_rank": r, "beta": beta, "super_polynomial": super_polynomial,
            "nominal": nominal, "effective": eff}


def _fixed_directions(N, count=8):
    rng = child_rng(0, STREAM_DIRECTIONS)
    v = rng.standard_normal((count, N))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.vstack([v, np.eye(N)])


def _cov_se(x):
    """Sample covariance (mean known to be 0) and its entrywise SE."""
    P = x.shape[0]
    prods = x[:, :, None] * x[:, None, :]
    return prods.mean(axis=0), prods.std(axis=0, ddof=1) / math.sqrt(P)


def clt_report(X, times, upsilon2, flags: Optional[dict] = None, threshold: float = 4.0,
               ks_alpha: float = 1e-3) -> dict:
    """Compare ``X`` (P x len(times) x N) with the Gaussian limit ``N(0, t Upsilon^2)``.

    Per time: covariance z-scores, one-sample KS on 8 fixed unit directions
    plus the axes, and the correlation of disjoint increments.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    P, nt, N = X.shape
    u2 = np.atleast_2d(np.asarray(upsilon2, dtype=float))
    dirs = _fixed_directions(N)
    per_time = []
    ok = True
    degenerate = bool(np.all(X == 0)) and bool(np.all(u2 == 0))
    for k, t in enumerate(times):
        x = X[:, k, :]
        cov_hat, se = _cov_se(x)
        target = t * u2
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, (cov_hat - target) / se, np.where(np.abs(cov_hat - target) > 0, np.inf, 0.0))
        ks = []
        for v in dirs:
            s = x @ v
            var = float(v @ target @ v)
            if var <= 0:
                ks.append({"direction": v.tolist(), "statistic": 0.0, "pvalue": 1.0, "degenerate": True})
                continue
            res = stats.kstest(s, "norm", args=(0.0, math.sqrt(var)))
            ks.append({"direction": v.tolist(), "statistic": float(res.statistic),
                       "pvalue": float(res.pvalue), "degenerate": False})
        min_p = min(d["pvalue"] for d in ks)
        entry = {"t": float(t), "cov": cov_hat.tolist(), "target": target.tolist(), "se": se.tolist(),
                 "max_abs_z": float(np.max(np.abs(z))), "ks": ks, "min_ks_p": min_p}
        if k > 0:
            prev = X[:, k - 1, :]
            inc = x - prev
            denom = np.sqrt(np.sum(prev**2, axis=0) * np.sum(inc**2, axis=0))
            with np.errstate(divide="ignore", invalid="ignore"):
                corr = np.where(denom > 0, np.sum(prev * inc, axis=0) / denom, 0.0)
            entry["increment_corr"] = corr.tolist()
            entry["increment_z"] = (np.abs(corr) * math.sqrt(P)).tolist()
        entry["pass"] = bool(entry["max_abs_z"] <= threshold and min_p >= ks_alpha)
        ok = ok and entry["pass"]
        per_time.append(entry)
    return {"n_paths": P, "per_time": per_time, "pass": ok, "degenerate": degenerate,
            "regime": flags or {}}


def area_report(area, t: float, lam, xi, threshold: float = 4.0) -> dict:
    """Mean left-point area ``XX_{0,t}`` vs ``t Lambda``; antisymmetric part vs ``t Xi``."""
    area = np.asarray(area, dtype=float)
    P = area.shape[0]
    lam = np.atleast_2d(lam)
    xi = np.atleast_2d(xi)
    mean = area.mean(axis=0)
    se = area.std(axis=0, ddof=1) / math.sqrt(P)
    anti = 0.5 * (area - np.swapaxes(area, 1, 2))
    amean = anti.mean(axis=0)
    ase = anti.std(axis=0, ddof=1) / math.sqrt(P)

    def zs(est, target, s):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, (est - target) / s, np.where(np.abs(est - target) > 0, np.inf, 0.0))
    z = zs(mean, t * lam, se)
    za = zs(amean, t * xi, ase)
    return {"t": t, "n_paths": P, "mean": mean.tolist(), "se": se.tolist(), "target": (t * lam).tolist(),
            "z": z.tolist(), "anti_mean": amean.tolist(), "anti_se": ase.tolist(),
            "anti_target": (t * xi).tolist(), "anti_z": za.tolist(),
            "pass": bool(np.max(np.abs(z)) <= threshold and np.max(np.abs(za)) <= threshold)}


def report_rows(name: str, est, se, target):
    """Flat ``(quantity, estimate, SE, target, z)`` rows for CSV output."""
    est = np.atleast_1d(np.asarray(est, dtype=float))
    se = np.atleast_1d(np.asarray(se, dtype=float))
    target = np.atleast_1d(np.asarray(target, dtype=float))
    rows = []
    for idx in np.ndindex(est.shape):
        s = float(se[idx])
        z = (float(est[idx]) - float(target[idx])) / s if s > 0 else 0.0
        label = name + "".join(f"[{i}]" for i in idx)
        rows.append((label, float(est[idx]), s, float(target[idx]), z))
    return rows


def expansions_for(observables, sigma, degree_cap: int = 8, quadrature_order=None):
    return [expand(G, sigma, degree_cap, quadrature_order) for G in observables]


def min_rank(expansions) -> float:
    return min(rank(e) for e in expansions)
