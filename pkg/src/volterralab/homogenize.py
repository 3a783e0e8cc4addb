"""Fast-slow homogenisation: the ODE ``dx = eps^{-1/2} f(x, y_{t/eps}) dt``,
its effective Kunita-type limit and law comparisons.

Fields are separable, ``f_j(x, y) = sum_m h_m(x) G_m(y)``, with spatial
factors that are products of one-dimensional sin / cos / polynomial / bump /
constant functions. All effective coefficients then reduce to the matrix
``Lambda^G_{m m'} = int_0^inf E[G_m(y_0) G_m'(y_r)] dr`` of the distinct
observables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from itertools import product
from math import comb
from typing import Optional, Sequence

import numpy as np

from .errors import (ConsistencyError, ExtrapolationError, GridError, ModelError, ParameterError)
from .hermite import HermiteExpansion, chaos_decay_sum, expand
from .limits import chaos_lag_correlation, mc_lag_correlation
from .seeding import STREAM_KUNITA, STREAM_PERMUTATION, child_rng
from .volterra import CovarianceModel, PathGrid, simulate_stationary


# --------------------------------------------------------------------------- #
# spatial factors
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Factor:
    """One-dimensional spatial factor acting on slow coordinate ``coord``.

    kinds: ``sin`` / ``cos`` (``amp * sin(freq x + phase)``), ``poly``
    (coefficients in increasing degree), ``bump`` (1 on ``|x| <= R``, 0 on
    ``|x| >= 2R``, quintic smoothstep between), ``const``.
    """

    kind: str
    coord: int = 0
    freq: float = 1.0
    phase: float = 0.0
    amp: float = 1.0
    coeffs: tuple = ()
    radius: float = 1.0

    def deriv(self, x, order: int = 0):
        x = np.asarray(x, dtype=float)
        if self.kind in ("sin", "cos"):
            # d^k sin(u) = sin(u + k pi/2)
            shift = order * math.pi / 2 + (math.pi / 2 if self.kind == "cos" else 0.0)
            return self.amp * self.freq**order * np.sin(self.freq * x + self.phase + shift)
        if self.kind == "poly":
            c = np.polynomial.polynomial.polyder(np.asarray(self.coeffs, dtype=float), order) \
                if order else np.asarray(self.coeffs, dtype=float)
            return np.polynomial.polynomial.polyval(x, c) if c.size else np.zeros_like(x)
        if self.kind == "const":
            return np.full_like(x, self.amp if order == 0 else 0.0)
        if self.kind == "bump":
            return _bump(x, self.radius, order)
        raise ParameterError(f"unknown spatial factor {self.kind!r}")


def _bump(x, R, order):
    """Quintic smoothstep cutoff and its derivatives (C^2 at both joints)."""
    a = np.abs(x)
    s = np.clip((a - R) / R, 0.0, 1.0)
    inside = (a > R) & (a < 2 * R)
    # eta(s) = 1 - (10 s^3 - 15 s^4 + 6 s^5)
    polys = [
        lambda s: 1 - (10 * s**3 - 15 * s**4 + 6 * s**5),
        lambda s: -(30 * s**2 - 60 * s**3 + 30 * s**4),
        lambda s: -(60 * s - 180 * s**2 + 120 * s**3),
        lambda s: -(60 - 360 * s + 360 * s**2),
    ]
    if order == 0:
        return np.where(a <= R, 1.0, np.where(a >= 2 * R, 0.0, polys[0](s)))
    if order > 3:
        raise ParameterError("bump derivatives supported up to order 3")
    sign = np.sign(x) ** order
    return np.where(inside, polys[order](s) * sign / R**order, 0.0)


def _product_deriv(factors, x, order):
    """``d^order/dx^order`` of a product of 1-d factors (general Leibniz)."""
    if not factors:
        return np.ones_like(x) if order == 0 else np.zeros_like(x)
    head, rest = factors[0], factors[1:]
    out = np.zeros_like(x)
    for j in range(order + 1):
        out = out + comb(order, j) * head.deriv(x, j) * _product_deriv(rest, x, order - j)
    return out


@dataclass(frozen=True, eq=False)
class FieldTerm:
    component: int
    factors: tuple
    observable: object

    def spatial(self, x, k: Optional[tuple] = None):
        """``D_k h(x)`` for points x of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        k = (0,) * d if k is None else k
        out = np.ones(x.shape[:-1])
        for a in range(d):
            fa = [f for f in self.factors if f.coord == a]
            out = out * _product_deriv(fa, x[..., a], k[a])
        return out


@dataclass(frozen=True, eq=False)
class FieldModel:
    """Separable field ``f : R^d x R^n -> R^d``.

    ``observables`` lists the distinct ``G_m``; each term points to one of
    them by identity.
    """

    d: int
    n: int
    terms: tuple
    sigma: np.ndarray
    degree_cap: int = 8
    support_radius: Optional[float] = None
    expansions: dict = dc_field(default_factory=dict)

    @property
    def observables(self):
        seen = []
        for t in self.terms:
            if not any(t.observable is s for s in seen):
                seen.append(t.observable)
        return seen

    def obs_index(self, G) -> int:
        for i, s in enumerate(self.observables):
            if s is G:
                return i
        raise KeyError(G)

    def expansion(self, G) -> HermiteExpansion:
        key = id(G)
        if key not in self.expansions:
            self.expansions[key] = expand(G, self.sigma, self.degree_cap)
        return self.expansions[key]

    def coefficient_matrix(self, x, k: Optional[tuple] = None):
        """``H[..., j, m] = sum_{terms (j, G_m)} D_k h(x)``."""
        x = np.asarray(x, dtype=float)
        obs = self.observables
        H = np.zeros(x.shape[:-1] + (self.d, len(obs)))
        for t in self.terms:
            H[..., t.component, self.obs_index(t.observable)] += t.spatial(x, k)
        return H

    def gradient_matrices(self, x):
        """``dH[..., i, j, m] = d/dx_i H[..., j, m]``."""
        out = []
        for i in range(self.d):
            k = tuple(1 if a == i else 0 for a in range(self.d))
            out.append(self.coefficient_matrix(x, k))
        return np.stack(out, axis=-3)

    def __call__(self, x, y):
        """``f(x, y)`` for x (..., d) and y (..., n) -> (..., d)."""
        H = self.coefficient_matrix(x)
        G = np.stack([np.asarray(g(y), dtype=float) for g in self.observables], axis=-1)
        return np.einsum("...jm,...m->...j", H, G)

    @property
    def x_independent(self) -> bool:
        return all(all(f.kind == "const" for f in t.factors) for t in self.terms)


def product_field(factors: Sequence[Factor], G, sigma, component: int = 0, d: int = 1,
                  degree_cap: int = 8) -> FieldModel:
    n = np.atleast_2d(sigma).shape[0]
    return FieldModel(d, n, (FieldTerm(component, tuple(factors), G),), np.atleast_2d(np.asarray(sigma, float)),
                      degree_cap)


def field_sum(*terms: FieldTerm, sigma, d: int = 1, degree_cap: int = 8, support_radius=None) -> FieldModel:
    n = np.atleast_2d(sigma).shape[0]
    return FieldModel(d, n, tuple(terms), np.atleast_2d(np.asarray(sigma, float)), degree_cap, support_radius)


# --------------------------------------------------------------------------- #
# condition checks
# --------------------------------------------------------------------------- #

def _derivative_orders(d, max_order=3):
    out = []
    for total in range(max_order + 1):
        for k in product(range(total + 1), repeat=d):
            if sum(k) == total:
                out.append(k)
    return out


def _combined_coeffs(field: FieldModel, H_row):
    """Coefficients of ``sum_m H_m G_m`` from the per-observable expansions."""
    acc = {}
    for m, G in enumerate(field.observables):
        if H_row[m] == 0:
            continue
        for ell, c in field.expansion(G).coeffs.items():
            acc[ell] = acc.get(ell, 0.0) + H_row[m] * c
    return acc


def field_condition_check(field: FieldModel, beta: float, theta_hat: float, p: float, grid,
                          super_polynomial: bool = False, ball_radius: Optional[float] = None) -> dict:
    """Rank condition ``inf_x rank f_j(x, .) > 2 / beta``, derivative-rank
    monotonicity and the weighted supremum sums for ``|k| <= 3``."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if ball_radius is not None:
        grid = grid[np.linalg.norm(grid, axis=1) <= ball_radius]
    n = field.n
    weight = (4 * n - 1) * (p - 1)
    orders = _derivative_orders(field.d)
    min_rank = math.inf
    monotone = True
    sup_sums = {}
    tol = 1e-9
    for k in orders:
        best = 0.0
        for x in grid:
            H = field.coefficient_matrix(x[None, :], k)[0]
            H0 = field.coefficient_matrix(x[None, :])[0] if any(k) else H
            for j in range(field.d):
                ck = _combined_coeffs(field, H[j])
                s = sum(abs(c) * weight ** (ell.order / 2) * math.sqrt(ell.factorial) for ell, c in ck.items())
                best = max(best, s)
                rk = min((ell.order for ell, c in ck.items() if abs(c) > tol), default=math.inf)
                if not any(k):
                    min_rank = min(min_rank, rk)
                else:
                    c0 = _combined_coeffs(field, H0[j])
                    r0 = min((ell.order for ell, c in c0.items() if abs(c) > tol), default=math.inf)
                    if rk < r0 and not (math.isinf(r0)):
                        monotone = False
        sup_sums[str(k)] = float(best)
    degenerate = math.isinf(min_rank)
    threshold = 2.0 / beta
    nominal = bool(min_rank > threshold)
    boundary = bool(min_rank == threshold)
    passes = (not degenerate) and (nominal or (super_polynomial and min_rank >= 1))
    decay_ok = True
    for G in field.observables:
        e = field.expansion(G)
        decay_ok = decay_ok and chaos_decay_sum(e, weight + 1 if weight > 0 else 2.0).converging
    return {"min_rank": float(min_rank) if math.isinf(min_rank) else int(min_rank), "threshold": threshold, "rank_condition": nominal, "boundary": boundary,
            "super_polynomial": super_polynomial, "passes": bool(passes), "degenerate": degenerate,
            "derivative_rank_monotone": monotone, "sup_sums": sup_sums, "decay_converging": decay_ok,
            "theta_hat": theta_hat, "p": p, "beta": beta}


# --------------------------------------------------------------------------- #
# fast-slow integration
# --------------------------------------------------------------------------- #

@dataclass
class SlowPaths:
    times: np.ndarray
    x: np.ndarray          # (P, len(times), d)
    blown_up: np.ndarray   # (P,) bool


def integrate_fast_slow(field: FieldModel, y, fast_step: float, epsilon: float, x0, T: float,
                        substep: float = 1.0, out_every: Optional[int] = None) -> SlowPaths:
    """Heun integration of ``dx = eps^{-1/2} f(x, y_{t/eps}) dt``.

    ``y`` holds fast paths (P, M, n) (or (M, n)) at spacing ``fast_step``;
    between nodes the driver is linearly interpolated. The slow step is
    ``eps * fast_step * substep`` where ``1/substep`` must be an integer.
    Paths with ``|x| > 1e6`` are frozen and flagged.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        y = y[None]
    if not (0 < substep <= 1):
        raise ParameterError("substep factor must lie in (0, 1]")
    sub = int(round(1 / substep))
    if abs(sub * substep - 1) > 1e-9:
        raise ParameterError("1/substep must be an integer")
    P, M, n = y.shape
    steps_fast = int(round(T / (epsilon * fast_step)))
    if abs(steps_fast * epsilon * fast_step - T) > 1e-9 * T:
        raise GridError("T must be a multiple of eps * fast_step")
    if M < steps_fast + 1:
        raise GridError(f"fast path has {M} nodes, {steps_fast + 1} needed to cover T/eps")
    h = epsilon * fast_step / sub
    scale = h / math.sqrt(epsilon)
    x = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1, field.d), (P, field.d)).copy()
    out_every = steps_fast if out_every is None else out_every
    times = [0.0]
    xs = [x.copy()]
    blown = np.zeros(P, dtype=bool)
    x_indep = field.x_independent
    if x_indep:
        H = field.coefficient_matrix(np.zeros((1, field.d)))[0]
        obs = field.observables
        G_all = np.stack([np.asarray(g(y[:, : steps_fast + 1]), dtype=float) for g in obs], axis=-1)
        f_nodes = np.einsum("jm,ptm->ptj", H, G_all)
    for k in range(steps_fast):
        for s in range(sub):
            a0, a1 = s / sub, (s + 1) / sub
            if x_indep:
                f0 = (1 - a0) * f_nodes[:, k] + a0 * f_nodes[:, k + 1]
                f1 = (1 - a1) * f_nodes[:, k] + a1 * f_nodes[:, k + 1]
                x_new = x + 0.5 * scale * (f0 + f1)
            else:
                y0 = (1 - a0) * y[:, k] + a0 * y[:, k + 1]
                y1 = (1 - a1) * y[:, k] + a1 * y[:, k + 1]
                k1 = field(x, y0)
                pred = x + scale * k1
                k2 = field(pred, y1)
                x_new = x + 0.5 * scale * (k1 + k2)
            bad = ~np.all(np.abs(x_new) <= 1e6, axis=1)
            blown |= bad
            x = np.where(blown[:, None], x, x_new)
        if (k + 1) % out_every == 0:
            times.append((k + 1) * epsilon * fast_step)
            xs.append(x.copy())
    return SlowPaths(np.array(times), np.stack(xs, axis=1), blown)


def fast_slow_ensemble(field: FieldModel, cov: CovarianceModel, epsilon: float, T: float, x0, fast_step: float,
                       n_paths: int, master_seed: int, substep: float = 1.0, chunk: int = 64,
                       threads: int = 1) -> SlowPaths:
    """Sample fast paths chunk by chunk and integrate the slow variable."""
    steps = int(round(T / (epsilon * fast_step)))
    grid = PathGrid(0.0, steps * fast_step, fast_step, steps + 1)
    parts = []
    for start in range(0, n_paths, chunk):
        stop = min(start + chunk, n_paths)
        ens = simulate_stationary(cov, grid, stop - start, master_seed, first_path=start, threads=threads)
        parts.append(integrate_fast_slow(field, ens.paths, fast_step, epsilon, x0, T, substep))
    return SlowPaths(parts[0].times, np.concatenate([p.x for p in parts]),
                     np.concatenate([p.blown_up for p in parts]))


# --------------------------------------------------------------------------- #
# effective coefficients
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Tensor grid with uniform axes; ``points`` in C order."""

    axes: tuple

    @property
    def d(self):
        return len(self.axes)

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def weights(self, x):
        """Multilinear weights: indices (P, 2^d) and weights (P, 2^d).

        Points up to one cell outside the hull are clamped to it; farther
        points raise ExtrapolationError.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx_parts, w_parts = [], []
        for a, ax in enumerate(self.axes):
            h = ax[1] - ax[0]
            xa = x[:, a]
            if np.any(xa < ax[0] - h) or np.any(xa > ax[-1] + h):
                worst = float(xa[np.argmax(np.maximum(ax[0] - xa, xa - ax[-1]))])
                raise ExtrapolationError(f"coordinate {a} value {worst:.6g} is more than one cell outside "
                                         f"[{ax[0]:.6g}, {ax[-1]:.6g}]")
            xc = np.clip(xa, ax[0], ax[-1])
            i = np.clip(np.floor((xc - ax[0]) / h).astype(int), 0, len(ax) - 2)
            t = np.clip((xc - ax[i]) / h, 0.0, 1.0)
            idx_parts.append((i, i + 1))
            w_parts.append((1 - t, t))
        P = x.shape[0]
        corners = list(product((0, 1), repeat=self.d))
        idx = np.zeros((P, len(corners)), dtype=int)
        w = np.ones((P, len(corners)))
        strides = np.cumprod((self.shape[1:] + (1,))[::-1])[::-1]
        for c, corner in enumerate(corners):
            for a, bit in enumerate(corner):
                idx[:, c] += idx_parts[a][bit] * strides[a]
                w[:, c] *= w_parts[a][bit]
        return idx, w


def uniform_grid(lows, highs, counts) -> SpatialGrid:
    lows, highs, counts = np.atleast_1d(lows), np.atleast_1d(highs), np.atleast_1d(counts)
    return SpatialGrid(tuple(np.linspace(l, h, int(c)) for l, h, c in zip(lows, highs, counts)))


@dataclass(frozen=True, eq=False)
class EffectiveModel:
    """Tables of ``Lambda(x, z)``, ``sigma(x, z)`` (K x K x d x d) and
    ``Gamma(x)`` (K x d) on ``grid`` (multilinear interpolation)."""

    grid: SpatialGrid
    lambda_field: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    lambda_g: np.ndarray
    horizon: float
    se: Optional[dict] = None
    consistency: Optional[dict] = None
    sigma_const: Optional[np.ndarray] = None    # d x d, set for x-independent fields

    def gamma_at(self, x):
        idx, w = self.grid.weights(x)
        return np.einsum("pc,pcj->pj", w, self.gamma[idx])

    def sigma_block(self, xs):
        """``[sigma(x_a, x_b)]`` for points xs (..., Npts, d) -> (..., Npts*d, Npts*d)."""
        xs = np.asarray(xs, dtype=float)
        lead = xs.shape[:-2]
        Np, d = xs.shape[-2:]
        if self.sigma_const is not None:
            # exact constant block, so every point receives the same increment
            self.grid.weights(xs.reshape(-1, d))
            return np.broadcast_to(np.tile(self.sigma_const, (Np, Np)), lead + (Np * d, Np * d)).copy()
        flat = xs.reshape(-1, d)
        idx, w = self.grid.weights(flat)
        idx = idx.reshape(lead + (Np, -1))
        w = w.reshape(lead + (Np, -1))
        # S[..., a, b, i, j] = sum_{c,e} w[a,c] w[b,e] sigma[idx[a,c], idx[b,e], i, j]
        tab = self.sigma[idx[..., :, None, :, None], idx[..., None, :, None, :]]
        S = np.einsum("...ac,...be,...abceij->...abij", w, w, tab)
        return np.moveaxis(S, -2, -3).reshape(lead + (Np * d, Np * d))


def _assemble(field: FieldModel, grid: SpatialGrid, lam_g):
    pts = grid.points
    H = field.coefficient_matrix(pts)           # K x d x M
    dH = field.gradient_matrices(pts)           # K x d(i) x d(j) x M
    lam = np.einsum("aim,mq,bjq->abij", H, lam_g, H)
    sigma = lam + np.transpose(lam, (1, 0, 3, 2))
    # Gamma_j(x) = sum_i sum_{m,q} H[x,i,q] Lambda^G[q,m] dH[x,i,j,m]
    gamma = np.einsum("aiq,qm,aijm->aj", H, lam_g, dH)
    return lam, sigma, gamma


def effective_coefficients(field: FieldModel, cov: CovarianceModel, grid: SpatialGrid, horizon: float,
                           dr: float = 1e-3, mc_paths: int = 0, mc_span: float = 200.0,
                           mc_step: float = 0.05, master_seed: int = 0, check_points: int = 12,
                           threshold: float = 5.0) -> EffectiveModel:
    """Effective coefficients on a spatial grid.

    The chaos-analytic ``Lambda^G`` (trapezoid on ``[0, horizon]``) is the
    primary estimate. With ``mc_paths > 0`` a Monte Carlo estimate from
    stationary paths is formed too and every (x, z, i, j) cell of Lambda,
    sigma and Gamma on a subgrid is cross-checked; a gap above
    ``threshold`` combined SE raises ConsistencyError.
    """
    obs = field.observables
    exps = [field.expansion(G) for G in obs]
    m = int(round(horizon / dr))
    r = dr * np.arange(m + 1)
    rho = chaos_lag_correlation(exps, cov, r)
    lam_g = np.trapezoid(rho, r, axis=0)
    lam, sigma, gamma = _assemble(field, grid, lam_g)
    se = None
    consistency = None
    if mc_paths > 0:
        count = int(round(mc_span / mc_step)) + 1
        pgrid = PathGrid(0.0, (count - 1) * mc_step, mc_step, count)
        ens = simulate_stationary(cov, pgrid, mc_paths, master_seed)
        lag_steps = int(round(horizon / mc_step))
        mc = mc_lag_correlation(ens, obs, lag_steps)
        per = np.trapezoid(mc.per_path, mc.r_grid, axis=1)     # P x M x M
        # same horizon on the chaos side, on the MC lag grid, to compare like with like
        rho_c = chaos_lag_correlation(exps, cov, mc.r_grid)
        lam_c = np.trapezoid(rho_c, mc.r_grid, axis=0)
        sub = _subgrid(grid, check_points)
        worst = (0.0, None)
        cells = {}
        Hs = field.coefficient_matrix(sub)
        dHs = field.gradient_matrices(sub)
        sets = {
            "lambda": lambda L: np.einsum("aim,...mq,bjq->...abij", Hs, L, Hs),
            "gamma": lambda L: np.einsum("aiq,...qm,aijm->...aj", Hs, L, dHs),
        }
        for name, fn in sets.items():
            est_p = fn(per)
            est = est_p.mean(axis=0)
            s = est_p.std(axis=0, ddof=1) / math.sqrt(mc_paths)
            ref = fn(lam_c)
            if name == "lambda":
                sig_p = est_p + np.swapaxes(np.swapaxes(est_p, 1, 2), 3, 4)
                cells["sigma"] = (sig_p.mean(axis=0), sig_p.std(axis=0, ddof=1) / math.sqrt(mc_paths),
                                  ref + np.transpose(ref, (1, 0, 3, 2)))
            cells[name] = (est, s, ref)
        for name, (est, s, ref) in cells.items():
            diff = np.abs(est - ref)
            with np.errstate(divide="ignore", invalid="ignore"):
                z = np.where(s > 0, diff / s, np.where(diff > 1e-10, np.inf, 0.0))
            k = np.unravel_index(int(np.argmax(z)), z.shape)
            if z[k] > worst[0]:
                worst = (float(z[k]), (name, k))
        consistency = {"max_z": worst[0], "cell": _describe_cell(worst[1], sub), "threshold": threshold,
                       "lambda_g_mc": per.mean(axis=0).tolist(), "lambda_g_chaos": lam_c.tolist()}
        if worst[0] > threshold:
            raise ConsistencyError(f"Monte Carlo and chaos estimates disagree by {worst[0]:.2f} SE at "
                                   f"{consistency['cell']}")
        se = {"lambda_g": (per.std(axis=0, ddof=1) / math.sqrt(mc_paths)).tolist()}
    const = sigma[0, 0].copy() if field.x_independent else None
    return EffectiveModel(grid, lam, sigma, gamma, lam_g, horizon, se, consistency, const)


def _subgrid(grid: SpatialGrid, count: int):
    pts = grid.points
    step = max(1, len(pts) // count)
    return pts[::step][:count]


def _describe_cell(cell, pts):
    if cell is None:
        return None
    name, k = cell
    if name == "gamma":
        return {"quantity": name, "x": pts[k[0]].tolist(), "j": int(k[1])}
    return {"quantity": name, "x": pts[k[0]].tolist(), "z": pts[k[1]].tolist(), "i": int(k[2]), "j": int(k[3])}


# --------------------------------------------------------------------------- #
# N-point motion of the limit
# --------------------------------------------------------------------------- #

def pivoted_cholesky(C, rel_tol: float = 1e-10):
    """Batched pivoted Cholesky ``C ~ L L^T`` truncating pivots below
    ``rel_tol * trace``.

    Returns (L, dropped) with dropped the largest truncated pivot mass per
    batch entry. An exactly rank-deficient C yields a factor whose rows for
    identical points coincide bit for bit.

    Raises:
        ModelError: a pivot more negative than the tolerance (not PSD).
    """
    C = np.array(C, dtype=float)
    lead = C.shape[:-2]
    m = C.shape[-1]
    C = C.reshape(-1, m, m)
    B = C.shape[0]
    L = np.zeros((B, m, m))
    diag = np.diagonal(C, axis1=1, axis2=2).copy()
    tr = np.maximum(np.trace(C, axis1=1, axis2=2), 0.0)
    tol = rel_tol * np.where(tr > 0, tr, 1.0)
    active = np.ones(B, dtype=bool)
    dropped = np.zeros(B)
    rows = np.arange(B)
    done = np.zeros((B, m), dtype=bool)
    for k in range(m):
        cand = np.where(done, -np.inf, diag)
        p = np.argmax(cand, axis=1)
        piv = cand[rows, p]
        if np.any(piv < -tol):
            raise ModelError(f"assembled covariance is not PSD (pivot {piv.min():.3e})")
        use = active & (piv > tol)
        dropped = np.where(active & ~use, np.maximum(dropped, np.maximum(piv, 0.0)), dropped)
        active &= use
        if not np.any(use):
            break
        col = C[rows, :, p] - np.einsum("bj,bij->bi", L[rows, p, :], L)
        root = np.sqrt(np.where(use, piv, 1.0))
        lcol = np.where(use[:, None], col / root[:, None], 0.0)
        # the pivot entry uses the same col / root as the other rows, so duplicate points get equal rows
        lcol = np.where(done, 0.0, lcol)
        L[:, :, k] = lcol
        diag = diag - lcol**2
        done[rows[use], p[use]] = True
    resid = np.where(done, 0.0, diag)
    if np.any(resid < -np.maximum(tol, 1e-12)[:, None] * 10):
        raise ModelError("assembled covariance is not PSD beyond the truncation budget")
    dropped = np.maximum(dropped, np.max(np.abs(resid), axis=1))
    return L.reshape(lead + (m, m)), dropped.reshape(lead)


@dataclass
class NPointPaths:
    times: np.ndarray
    x: np.ndarray              # (P, len(times), Npts, d)
    max_dropped: float


def kunita_npoint_euler(model: EffectiveModel, x0s, T: float, dt: float, n_paths: int, master_seed: int,
                        sigma_scale: float = 1.0, store_every: Optional[int] = None) -> NPointPaths:
    """Euler-Maruyama for the N-point motion of the limit flow.

    Each step assembles the block covariance ``[sigma(x_a, x_b)] dt``,
    factors it by pivoted Cholesky and adds ``Gamma(x_a) dt``. Path ``i``
    draws from the stream ``(master_seed, STREAM_KUNITA + i)``.
    """
    if dt <= 0:
        raise ParameterError("dt must be positive")
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    Np, d = x0s.shape
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-9 * max(T, 1.0):
        raise GridError("T must be a multiple of dt")
    store_every = steps if store_every is None else store_every
    noise = np.stack([child_rng(master_seed, STREAM_KUNITA + i).standard_normal((steps, Np * d))
                      for i in range(n_paths)], axis=1) if n_paths else np.zeros((steps, 0, Np * d))
    x = np.broadcast_to(x0s, (n_paths, Np, d)).copy()
    times, out = [0.0], [x.copy()]
    max_drop = 0.0
    sq = math.sqrt(dt)
    for k in range(steps):
        flat = x.reshape(-1, d)
        drift = model.gamma_at(flat).reshape(n_paths, Np, d)
        C = sigma_scale * model.sigma_block(x)
        L, dropped = pivoted_cholesky(C)
        max_drop = max(max_drop, float(np.max(dropped)) if dropped.size else 0.0)
        inc = np.einsum("pij,pj->pi", L, noise[k]) * sq
        x = x + drift * dt + inc.reshape(n_paths, Np, d)
        if (k + 1) % store_every == 0:
            times.append((k + 1) * dt)
            out.append(x.copy())
    return NPointPaths(np.array(times), np.stack(out, axis=1), max_drop * dt)


# --------------------------------------------------------------------------- #
# law comparison
# --------------------------------------------------------------------------- #

def _pair_sum_1d(sorted_vals, mask):
    """``sum_{i<j} |v_i - v_j|`` over the masked subset of a sorted array."""
    v = sorted_vals[mask]
    n = v.size
    return float(v @ (2 * np.arange(n) - n + 1))


def energy_distance(a, b, n_perm: int = 200, seed: int = 0) -> dict:
    """Energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` with a permutation p-value.

    1-d samples use the sorted-sum identity (O(n) per permutation); higher
    dimensions use the pooled distance matrix.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    na, nb = len(a), len(b)
    z = np.vstack([a, b])
    n = na + nb
    rng = child_rng(seed, STREAM_PERMUTATION)
    labels = np.zeros(n, dtype=bool)
    labels[:na] = True

    if z.shape[1] == 1:
        order = np.argsort(z[:, 0], kind="stable")
        zs = z[order, 0]
        total = _pair_sum_1d(zs, np.ones(n, dtype=bool))

        def stat(lab):
            ls = lab[order]
            sa = _pair_sum_1d(zs, ls)
            sb = _pair_sum_1d(zs, ~ls)
            cross = total - sa - sb
            return 2 * cross / (na * nb) - 2 * sa / na**2 - 2 * sb / nb**2
    else:
        D = np.sqrt(np.maximum(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1), 0.0))

        def stat(lab):
            fa = lab.astype(float)
            fb = 1.0 - fa
            Da = D @ fa
            return 2 * (fb @ Da) / (na * nb) - (fa @ Da) / na**2 - (fb @ (D @ fb)) / nb**2

    e = stat(labels)
    perms = np.empty(n_perm)
    for k in range(n_perm):
        perms[k] = stat(rng.permutation(labels))
    p = (1 + np.sum(perms >= e)) / (n_perm + 1)
    return {"energy": float(e), "pvalue": float(p), "null_mean": float(perms.mean()),
            "null_sd": float(perms.std(ddof=1)), "n_perm": n_perm}


def _var_se(x):
    m = x.mean()
    c = x - m
    v = c.var(ddof=1)
    m4 = np.mean(c**4)
    return v, math.sqrt(max(m4 - v * v, 0.0) / len(x))


def limit_flow_compare(a, b, n_perm: int = 200, seed: int = 0, bias: float = 0.0,
                       threshold: float = 4.0) -> dict:
    """Compare two samples of the slow state at time T (P x k arrays).

    Per-coordinate mean and variance gaps with combined SE, the joint
    covariance for multi-coordinate samples, and the energy distance.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    coords = []
    ok = True
    for c in range(a.shape[1]):
        ma, mb = a[:, c].mean(), b[:, c].mean()
        sem = math.sqrt(a[:, c].var(ddof=1) / len(a) + b[:, c].var(ddof=1) / len(b))
        va, sva = _var_se(a[:, c])
        vb, svb = _var_se(b[:, c])
        sev = math.hypot(sva, svb)
        mean_ok = abs(ma - mb) <= threshold * sem + bias
        var_ok = abs(va - vb) <= threshold * sev + bias
        ok = ok and mean_ok and var_ok
        coords.append({"mean_a": float(ma), "mean_b": float(mb), "mean_diff": float(ma - mb), "mean_se": sem,
                       "mean_ok": bool(mean_ok), "var_a": float(va), "var_b": float(vb),
                       "var_diff": float(va - vb), "var_se": float(sev), "var_ok": bool(var_ok)})
    out = {"coordinates": coords, "moments_ok": bool(ok)}
    if a.shape[1] > 1:
        out["cov_a"] = np.cov(a, rowvar=False).tolist()
        out["cov_b"] = np.cov(b, rowvar=False).tolist()
    out["energy"] = energy_distance(a, b, n_perm, seed)
    return out
