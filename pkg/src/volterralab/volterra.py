"""Volterra kernels, their covariances, and stationary Gaussian path samplers.

A kernel is a finite sum ``K(t) = sum_m k_m(t) M_m`` of scalar causal
profiles ``k_m`` times fixed ``n x d`` mixing matrices. A single profile with
``M = [[1]]`` covers the scalar examples (fractional OU, fBm increments,
exponential OU, tabulated kernels); sums give genuinely multi-dimensional,
non-reversible processes.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, special
from scipy.interpolate import CubicSpline
from scipy.signal import fftconvolve

from .errors import (GridError, IntegrationError, NotPSDError, ParameterError,
                     SamplingInfeasibleError)
from .quadrature import gauss_legendre, halfline_nodes, integrate_halfline
from .seeding import child_rng, path_seeds

# Paths are generated in fixed-size blocks so output never depends on threads.
_BLOCK = 32
_FOU_SWITCH = 50.0


# --------------------------------------------------------------------------- #
# scalar profiles
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class Profile:
    """Scalar causal kernel profile ``k(t)`` (zero for ``t < 0``)."""

    variant: str
    hurst: Optional[float] = None
    rate: float = 1.0
    scale: float = 1.0
    grid: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    tail_exponent: Optional[float] = None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        pos = t >= 0
        if not np.any(pos):
            return out
        tp = t[pos]
        if self.variant == "zero":
            vals = np.zeros_like(tp)
        elif self.variant == "exp_ou":
            vals = np.exp(-self.rate * tp)
        elif self.variant == "fbm_increment":
            vals = _fbm_increment_profile(tp, self.hurst)
        elif self.variant == "fou":
            vals = _fou_profile(tp, self.hurst)
        elif self.variant == "tabulated":
            vals = np.interp(tp, self.grid, self.values, left=0.0, right=0.0)
            if self.tail_exponent is not None:
                beyond = tp > self.grid[-1]
                vals[beyond] = self.values[-1] * (tp[beyond] / self.grid[-1]) ** (-self.tail_exponent)
            vals[tp < self.grid[0]] = 0.0
        else:  # pragma: no cover - guarded by constructors
            raise ParameterError(f"unknown kernel variant {self.variant!r}")
        out[pos] = self.scale * vals
        return out

    def local(self, anchor, offset):
        """``k(anchor + offset)`` resolving offsets far below the spacing of
        floats near ``anchor`` when the anchor is a singular point."""
        anchor = np.asarray(anchor, dtype=float)
        offset = np.asarray(offset, dtype=float)
        out = self(anchor + offset)
        if self.variant == "fbm_increment" and self.hurst != 0.5:
            near = (np.abs(anchor - 1.0) < 1e-9) & (np.abs(offset) < 0.5)
            if np.any(near):
                b = self.hurst - 0.5
                x = offset[near]
                # t - 1 = x exactly, so the (t-1)^b singularity is resolved
                pos = np.where(x > 0, x, 1.0)
                vals = np.where(x > 0, (1.0 + x) ** b - pos**b, (1.0 + x) ** b)
                out[near] = self.scale * vals
        return out

    # description of the profile for the quadrature engine ------------------
    @property
    def singular_points(self):
        if self.variant == "fbm_increment":
            return (0.0,) if self.hurst == 0.5 else (0.0, 1.0)
        if self.variant in ("fou", "exp_ou"):
            return (0.0,)
        return (0.0,)

    @property
    def kinks(self):
        if self.variant == "tabulated":
            return tuple(float(g) for g in self.grid)
        return ()

    @property
    def support_end(self):
        if self.variant == "zero":
            return 0.0
        if self.variant == "fbm_increment" and self.hurst == 0.5:
            return 1.0
        if self.variant == "tabulated" and self.tail_exponent is None:
            return float(self.grid[-1])
        return math.inf

    @property
    def asymptote(self):
        """``(A, a)`` with ``k(t) ~ A t^{-a}`` for large t, or None."""
        if self.variant == "fbm_increment" and self.hurst != 0.5:
            b = self.hurst - 0.5
            return self.scale * b, 1.0 - b
        if self.variant == "fou":
            sign = 1.0 if self.hurst > 0.5 else -1.0
            return sign * self.scale, 1.5 - self.hurst
        if self.variant == "tabulated" and self.tail_exponent is not None:
            t_last = float(self.grid[-1])
            return self.scale * float(self.values[-1]) * t_last**self.tail_exponent, self.tail_exponent
        return None

    def rescaled(self, scale):
        return Profile(self.variant, self.hurst, self.rate, scale, self.grid, self.values,
                       self.tail_exponent)


def _fbm_increment_profile(t, hurst):
    b = hurst - 0.5
    out = np.empty_like(t)
    if b == 0.0:
        return np.where(t <= 1.0, 1.0, 0.0)
    small = t <= 1.0
    out[small] = t[small] ** b
    big = ~small
    tb = t[big]
    # t^b - (t-1)^b without cancellation
    out[big] = -(tb**b) * np.expm1(b * np.log1p(-1.0 / tb))
    return out


def _fou_profile(t, hurst):
    """fOU kernel with unit ``c_H``: ``int_0^t e^{-(t-v)} v^{H-3/2} dv`` for
    H > 1/2 and its finite-part analogue for H < 1/2."""
    b = hurst - 0.5
    out = np.empty_like(t)
    if b == 0.0:
        return np.exp(-t)
    near = t <= _FOU_SWITCH
    tn = t[near]
    with np.errstate(divide="ignore", invalid="ignore"):
        if b > 0:
            out[near] = tn**b * special.hyp1f1(1.0, b + 1.0, -tn) / b
        else:
            phi = tn ** (b + 1.0) * special.hyp1f1(1.0, b + 2.0, -tn) / (b + 1.0)
            out[near] = (tn**b - phi) / (-b)
    far = ~near
    if np.any(far):
        tf = t[far]
        sign = 1.0 if b > 0 else -1.0
        total = np.zeros_like(tf)
        coef = 1.0
        for k in range(60):
            term = coef * tf ** (b - 1.0 - k)
            total += term
            coef *= -(b - 1.0 - k)
            if np.all(np.abs(term) <= 1e-18 * np.abs(total)):
                break
        out[far] = sign * total
    return out


# --------------------------------------------------------------------------- #
# kernel spec
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Volterra kernel ``K(t) = sum_m k_m(t) M_m`` with decay parameters.

    Attributes:
        terms: pairs ``(profile, mixing)`` with mixing of shape ``(n, d)``.
        beta: decay exponent used in all criteria arithmetic.
        theta: decay constant of the tail-energy bound.
    """

    terms: tuple
    beta: float
    theta: float
    label: str = ""

    @property
    def n(self) -> int:
        return self.terms[0][1].shape[0]

    @property
    def d(self) -> int:
        return self.terms[0][1].shape[1]

    @property
    def variant(self) -> str:
        return self.terms[0][0].variant if len(self.terms) == 1 else "sum"

    @property
    def hurst(self):
        return self.terms[0][0].hurst

    @property
    def c_h(self) -> float:
        return self.terms[0][0].scale

    def __call__(self, t):
        return kernel_eval(self, t)

    def with_decay(self, beta=None, theta=None) -> "KernelSpec":
        beta = self.beta if beta is None else beta
        spec = KernelSpec(self.terms, beta, 1.0, self.label)
        theta = _fitted_theta(spec) if theta is None else theta
        return KernelSpec(self.terms, beta, float(theta), self.label)

    def with_mixing(self, mixing) -> "KernelSpec":
        mixing = np.atleast_2d(np.asarray(mixing, dtype=float))
        terms = tuple((p, mixing @ m) for p, m in self.terms)
        return _finish(terms, self.beta, None, self.label)

    def __add__(self, other: "KernelSpec") -> "KernelSpec":
        return kernel_sum(self, other)


def _check_hurst(hurst):
    if hurst is None or not (0.0 < hurst < 1.0):
        raise ParameterError(f"Hurst parameter must lie in (0, 1), got {hurst!r}")


def _finish(terms, beta, theta, label):
    n = {m.shape[0] for _, m in terms}
    d = {m.shape[1] for _, m in terms}
    if len(n) != 1 or len(d) != 1:
        raise ParameterError("all kernel terms must share the same (n, d) shape")
    if beta is None or beta <= 0:
        raise ParameterError(f"decay exponent beta must be positive, got {beta!r}")
    spec = KernelSpec(tuple(terms), float(beta), 1.0, label)
    if theta is None:
        theta = _fitted_theta(spec)
    if theta <= 0:
        raise ParameterError(f"decay constant theta must be positive, got {theta!r}")
    return KernelSpec(tuple(terms), float(beta), float(theta), label)


def _mixing(mixing):
    if mixing is None:
        return np.ones((1, 1))
    return np.atleast_2d(np.asarray(mixing, dtype=float))


def fbm_increment(hurst: float, c_h: Optional[float] = None, beta=None, theta=None,
                  mixing=None) -> KernelSpec:
    """Kernel of ``B_t - B_{t-1}``; ``c_h=None`` gives unit variance."""
    _check_hurst(hurst)
    if c_h is None:
        # Mandelbrot-Van Ness constant for Var(B_1) = 1
        c_h = math.sqrt(2 * hurst * math.sin(math.pi * hurst) * math.gamma(2 * hurst)) / math.gamma(hurst + 0.5)
    prof = Profile("fbm_increment", hurst=float(hurst), scale=float(c_h))
    beta = 1.0 - hurst if beta is None else beta
    return _finish(((prof, _mixing(mixing)),), beta, theta, f"fbm_increment(H={hurst})")


def fou(hurst: float, c_h: Optional[float] = None, beta=None, theta=None, mixing=None) -> KernelSpec:
    """Stationary fractional OU kernel (unit mean-reversion rate).

    ``c_h=None`` fixes the constant so that ``Var(y_0) = 1``.
    """
    _check_hurst(hurst)
    prof = Profile("fou", hurst=float(hurst), scale=1.0)
    if c_h is None:
        energy, _ = _pair_integral(prof, prof, 0.0, 0.0)
        c_h = 1.0 / math.sqrt(energy)
    prof = prof.rescaled(float(c_h))
    beta = 1.0 - hurst if beta is None else beta
    return _finish(((prof, _mixing(mixing)),), beta, theta, f"fou(H={hurst})")


def exp_ou(rate: float = 1.0, scale: float = 1.0, unit_variance: bool = False, beta=1.0,
           theta=None, mixing=None) -> KernelSpec:
    """``K(t) = scale * exp(-rate t)``; ``unit_variance`` sets scale = sqrt(2 rate).

    The decay is super-polynomial so any ``beta`` is admissible; the chosen
    value only enters criteria arithmetic.
    """
    if rate <= 0:
        raise ParameterError(f"rate must be positive, got {rate!r}")
    if unit_variance:
        scale = math.sqrt(2.0 * rate)
    prof = Profile("exp_ou", rate=float(rate), scale=float(scale))
    return _finish(((prof, _mixing(mixing)),), beta, theta, f"exp_ou(rate={rate})")


def tabulated(grid, values, tail_exponent=None, beta=None, theta=None, mixing=None) -> KernelSpec:
    """Piecewise-linear kernel through ``(grid, values)``.

    Beyond the last node the kernel is zero, or continues as a power law
    ``t^{-tail_exponent}`` when an exponent is given.
    """
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
        raise ParameterError("tabulated kernel needs matching 1-d grid and values (>= 2 nodes)")
    if np.any(np.diff(grid) <= 0):
        raise ParameterError("tabulated kernel grid must be strictly increasing")
    if grid[0] < 0:
        raise ParameterError("tabulated kernel grid must start at t >= 0")
    if not np.all(np.isfinite(values)):
        raise ParameterError("tabulated kernel values must be finite")
    if tail_exponent is not None and tail_exponent <= 0.5:
        raise IntegrationError(
            f"tabulated kernel with tail exponent {tail_exponent} is not square integrable", math.inf)
    prof = Profile("tabulated", grid=grid, values=values,
                   tail_exponent=None if tail_exponent is None else float(tail_exponent))
    if beta is None:
        beta = 1.0 if tail_exponent is None else tail_exponent - 0.5
    return _finish(((prof, _mixing(mixing)),), beta, theta, "tabulated")


def tabulated_from_csv(path, **kwargs) -> KernelSpec:
    """Load a two-column ``t,value`` file with one header line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tabulated kernel file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    data = np.array([[float(a), float(b)] for a, b in rows if a.strip()], dtype=float)
    return tabulated(data[:, 0], data[:, 1], **kwargs)


def zero_kernel(n: int = 1, d: int = 1) -> KernelSpec:
    return _finish(((Profile("zero"), np.zeros((n, d))),), 1.0, 1.0, "zero")


def kernel_sum(*specs: KernelSpec, beta=None, theta=None) -> KernelSpec:
    terms = tuple(t for s in specs for t in s.terms)
    beta = min(s.beta for s in specs) if beta is None else beta
    return _finish(terms, beta, theta, " + ".join(s.label for s in specs))


def kernel_eval(spec: KernelSpec, t):
    """``K(t)`` as an array of shape ``t.shape + (n, d)``; exactly zero for t < 0."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (spec.n, spec.d))
    for prof, mix in spec.terms:
        out += prof(t)[..., None, None] * mix
    return out


# --------------------------------------------------------------------------- #
# pair integrals: int_lower^inf k1(s) k2(s + lag) ds
# --------------------------------------------------------------------------- #

def _pair_integral(p1: Profile, p2: Profile, lag: float, lower: float):
    """Return ``(value, residual)`` of ``int_lower^inf p1(s) p2(s+lag) ds``."""
    if p1.variant == "zero" or p2.variant == "zero":
        return 0.0, 0.0
    if p1.variant == "exp_ou" and p2.variant == "exp_ou":
        r = p1.rate + p2.rate
        return p1.scale * p2.scale * math.exp(-p2.rate * lag - r * lower) / r, 0.0
    end = min(p1.support_end, p2.support_end - lag)
    if end <= lower:
        return 0.0, 0.0
    sing = set(p1.singular_points) | {s - lag for s in p2.singular_points}
    kinks = set(p1.kinks) | {k - lag for k in p2.kinks}
    remainder = None
    far = 1e30
    if math.isinf(end):
        a1, a2 = p1.asymptote, p2.asymptote
        if "exp_ou" in (p1.variant, p2.variant):
            rate = p1.rate if p1.variant == "exp_ou" else p2.rate
            far = lower + 760.0 / rate
        elif a1 is not None and a2 is not None:
            if a1[1] + a2[1] <= 1.0:
                raise IntegrationError("kernel product is not integrable at infinity", math.inf)

            def remainder(S, A=a1[0] * a2[0], p=a1[1] + a2[1]):
                # leading-order power tail; relative error O(lag / S)
                return A * S ** (1.0 - p) / (p - 1.0)
        else:  # pragma: no cover
            raise IntegrationError("no tail model for kernel product", math.inf)
        upper = math.inf
    else:
        upper = end

    def integrand(anchor, offset):
        return p1.local(anchor, offset) * p2.local(anchor + lag, offset)

    nodes_bps = sorted(sing | kinks)
    value, res = integrate_halfline(integrand, nodes_bps, lower=lower, upper=upper,
                                    remainder=remainder, far=far, atol=1e-300, local=True)
    return float(value), res


def _term_pair_matrix(spec: KernelSpec, lag: float, lower: float):
    """``sum_{m,m'} I(k_m, k_m', lag, lower) M_m M_{m'}^T`` (n x n)."""
    out = np.zeros((spec.n, spec.n))
    for p1, m1 in spec.terms:
        for p2, m2 in spec.terms:
            val, _ = _pair_integral(p1, p2, lag, lower)
            if val != 0.0:
                out += val * (m1 @ m2.T)
    return out


def covariance_of_lag(spec: KernelSpec, lag: float, quad_order: Optional[int] = None):
    """``E[y_0 (x) y_lag] = int K(-u) K(lag-u)^T du`` by adaptive quadrature.

    Always integrates numerically (closed forms are used only as test
    oracles); ``quad_order`` is accepted for interface compatibility and the
    panel refinement picks the order itself.
    """
    if lag < 0:
        raise ParameterError("lag must be non-negative")
    out = np.zeros((spec.n, spec.n))
    for p1, m1 in spec.terms:
        for p2, m2 in spec.terms:
            if p1.variant == "zero" or p2.variant == "zero":
                continue
            val, _ = _numeric_pair(p1, p2, lag, 0.0)
            out += val * (m1 @ m2.T)
    if lag == 0:
        out = 0.5 * (out + out.T)
    return out


def _numeric_pair(p1, p2, lag, lower):
    """Pair integral forced through quadrature even for exponential profiles."""
    if p1.variant == "exp_ou" and p2.variant == "exp_ou":
        end = math.inf
        far = lower + 760.0 / min(p1.rate, p2.rate)

        def integrand(s):
            return p1(s) * p2(s + lag)
        val, res = integrate_halfline(integrand, sorted({0.0, -lag}), lower=lower, upper=far)
        return float(val), res
    return _pair_integral(p1, p2, lag, lower)


def tail_gram(spec: KernelSpec, t: float):
    """``int_t^inf K(u) K(u)^T du``; its diagonal holds the row tail energies."""
    return _term_pair_matrix(spec, 0.0, max(float(t), 0.0))


def tail_energy(spec: KernelSpec, t: float):
    return np.diag(tail_gram(spec, t)).copy()


@dataclass
class TailReport:
    max_violation: float
    passes: bool
    t: np.ndarray
    tails: np.ndarray
    bound: np.ndarray


def decay_bound(theta, beta, t):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return theta * np.minimum(1.0, np.where(t > 0, t, 0.0) ** (-2.0 * beta))


def tail_energy_check(spec: KernelSpec, ts: Sequence[float]) -> TailReport:
    """Compare row tail energies with ``theta (1 ^ t^{-2 beta})`` on ``ts``."""
    ts = np.asarray(ts, dtype=float)
    tails = np.array([tail_energy(spec, t) for t in ts])
    bound = decay_bound(spec.theta, spec.beta, ts)
    viol = float(np.max(tails - bound[:, None])) if ts.size else -math.inf
    return TailReport(viol, viol <= 1e-8 * spec.theta, ts, tails, bound)


def _fitted_theta(spec: KernelSpec) -> float:
    """Smallest decay constant valid on a log grid (plus the asymptotic limit),
    inflated by 1%."""
    if all(p.variant == "zero" for p, _ in spec.terms):
        return 1.0
    ts = np.concatenate([[0.0], np.logspace(-3, 6, 46)])
    best = 0.0
    for t in ts:
        e = tail_energy(spec, t)
        b = decay_bound(1.0, spec.beta, t)
        best = max(best, float(np.max(e / b)))
    # asymptotic constant of t^{2 beta} * tail(t) for power-law terms
    t_far = 1e12
    e = tail_energy(spec, t_far)
    best = max(best, float(np.max(e / decay_bound(1.0, spec.beta, t_far))))
    return 1.01 * best if best > 0 else 1.0


# --------------------------------------------------------------------------- #
# covariance model
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class CovarianceModel:
    """Stationary covariance ``corr(lag) = E[y_0 (x) y_lag]``.

    ``corr`` takes an array of non-negative lags and returns ``(L, n, n)``.
    """

    sigma0: np.ndarray
    corr: Callable
    theta_hat: Optional[float] = None
    max_lag: float = math.inf
    kernel: Optional[KernelSpec] = None

    @property
    def n(self) -> int:
        return self.sigma0.shape[0]

    def __call__(self, lags):
        lags = np.atleast_1d(np.asarray(lags, dtype=float))
        if np.any(lags < 0):
            raise ParameterError("lags must be non-negative")
        if np.any(lags > self.max_lag * (1 + 1e-12)):
            raise ParameterError(f"lag beyond tabulated range {self.max_lag}")
        return self.corr(lags)

    @classmethod
    def from_function(cls, func, n: int = 1, theta_hat=None):
        """Wrap a (scalar or matrix) covariance function of the lag."""
        def corr(lags):
            vals = np.asarray(func(lags), dtype=float)
            return vals.reshape(lags.shape + (n, n))
        sigma0 = corr(np.zeros(1))[0]
        return cls(0.5 * (sigma0 + sigma0.T), corr, theta_hat)


def _closed_pair(p1: Profile, p2: Profile):
    """Vectorised closed form of ``lag -> I(p1, p2, lag, 0)`` when available."""
    if p1.variant == "zero" or p2.variant == "zero":
        return lambda lag: np.zeros_like(lag)
    if p1.variant == "exp_ou" and p2.variant == "exp_ou":
        c = p1.scale * p2.scale / (p1.rate + p2.rate)
        return lambda lag: c * np.exp(-p2.rate * lag)
    if (p1.variant == p2.variant == "fbm_increment" and p1.hurst == p2.hurst):
        h2 = 2.0 * p1.hurst
        # c_H^2 / unit-variance constant^2 rescales the fBm increment covariance
        ref = fbm_increment(p1.hurst, beta=1.0, theta=1.0).c_h
        c = p1.scale * p2.scale / ref**2
        return lambda lag: c * 0.5 * (np.abs(lag + 1) ** h2 + np.abs(lag - 1) ** h2 - 2 * np.abs(lag) ** h2)
    return None


def covariance_model(spec: KernelSpec, method: str = "auto", max_lag: Optional[float] = None,
                     lag_step: float = 0.05) -> CovarianceModel:
    """Build the covariance model of a kernel.

    ``method="auto"`` uses closed forms for exponential and fBm-increment
    profile pairs and tabulates the rest by quadrature on ``[0, max_lag]``
    with cubic-spline interpolation.
    """
    from .hermite import normalize_covariance  # local import: hermite depends on volterra

    pairs = []
    need_table = False
    for p1, m1 in spec.terms:
        for p2, m2 in spec.terms:
            f = None if method == "quadrature" else _closed_pair(p1, p2)
            if f is None:
                need_table = True
            pairs.append((p1, p2, m1 @ m2.T, f))
    limit = math.inf
    if need_table:
        if max_lag is None:
            raise ParameterError("max_lag is required to tabulate a covariance by quadrature")
        limit = float(max_lag)
        near = np.arange(0.0, min(4.0, limit) + 1e-12, lag_step)
        far_part = np.logspace(np.log10(max(4.0, lag_step)), np.log10(max(limit, 4.0)), 200)
        table_lags = np.unique(np.concatenate([near, far_part[far_part <= limit * (1 + 1e-12)]]))
        if table_lags[-1] < limit:
            table_lags = np.append(table_lags, limit)
        fitted = []
        for p1, p2, mat, f in pairs:
            if f is not None:
                fitted.append((mat, f))
                continue
            vals = np.array([_pair_integral(p1, p2, float(l), 0.0)[0] for l in table_lags])
            spline = CubicSpline(table_lags, vals)
            fitted.append((mat, spline))
    else:
        fitted = [(mat, f) for _, _, mat, f in pairs]

    def corr(lags):
        out = np.zeros(lags.shape + (spec.n, spec.n))
        for mat, f in fitted:
            out += np.asarray(f(lags))[..., None, None] * mat
        return out

    sigma0 = corr(np.zeros(1))[0]
    sigma0 = 0.5 * (sigma0 + sigma0.T)
    theta_hat = None
    if np.any(sigma0 != 0):
        norm = normalize_covariance(sigma0)
        theta_hat = norm.theta_hat(spec.theta)
    return CovarianceModel(sigma0, corr, theta_hat, limit, spec)


# --------------------------------------------------------------------------- #
# grids and ensembles
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class PathGrid:
    t0: float
    t1: float
    step: float
    count: int

    def __post_init__(self):
        if not self.step > 0:
            raise GridError("grid step must be positive")
        expected = (self.t1 - self.t0) / self.step + 1
        if abs(expected - self.count) > 1e-9 * max(1.0, expected):
            raise GridError(f"grid count {self.count} does not match (t1-t0)/h + 1 = {expected}")

    @classmethod
    def span(cls, t0: float, t1: float, step: float) -> "PathGrid":
        m = (t1 - t0) / step
        k = int(round(m))
        if abs(m - k) > 1e-9 * max(1.0, m):
            raise GridError(f"step {step} does not divide [{t0}, {t1}]")
        return cls(float(t0), float(t0 + k * step), float(step), k + 1)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.count)


@dataclass(frozen=True, eq=False)
class GaussianEnsemble:
    """Monte Carlo sample of stationary Volterra paths ``y``.

    Attributes:
        paths: array ``(n_paths, count, n)``.
        per_path_seeds: child seed of each path (``mix64(master_seed, i)``).
        truncation_bound: neglected tail energy (moving-average sampler only).
    """

    grid: PathGrid
    paths: np.ndarray
    master_seed: int
    per_path_seeds: np.ndarray
    method: str
    first_path: int = 0
    truncation_bound: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    def normalized(self, normalizer) -> np.ndarray:
        """Normalised paths ``z = D^{-1/2} O^T y``."""
        return normalizer.to_z(self.paths)


def _run_blocks(n_paths, first_path, threads, work):
    """Apply ``work(start, stop)`` over fixed blocks and concatenate in order."""
    starts = list(range(0, n_paths, _BLOCK))
    spans = [(first_path + s, first_path + min(s + _BLOCK, n_paths)) for s in starts]
    if threads and threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda sp: work(*sp), spans))
    else:
        parts = [work(*sp) for sp in spans]
    return np.concatenate(parts, axis=0) if parts else None


def _circulant_factors(blocks):
    """Per-frequency square roots of a block-circulant embedding.

    Returns (sqrt_factors (L, n, n) complex, min_eig, max_eig).
    """
    L, n, _ = blocks.shape
    lam = L * np.fft.ifft(blocks, axis=0)
    lam = 0.5 * (lam + np.conj(np.swapaxes(lam, 1, 2)))
    if n == 1:
        ev = lam[:, 0, 0].real
        mn, mx = float(ev.min()), float(ev.max())
        return np.sqrt(np.clip(ev, 0, None)).reshape(L, 1, 1).astype(complex), mn, mx
    w, v = np.linalg.eigh(lam)
    mn, mx = float(w.min()), float(w.max())
    root = (v * np.sqrt(np.clip(w, 0, None))[:, None, :]) @ np.conj(np.swapaxes(v, 1, 2))
    return root, mn, mx


def _embedding_blocks(cov_seq):
    """Even-reflection block-circulant first row from ``C(0..M-1)``."""
    M, n, _ = cov_seq.shape
    if M == 1:
        return cov_seq.copy()
    symmetric_end = np.allclose(cov_seq[-1], cov_seq[-1].T, atol=0, rtol=0)
    if symmetric_end:
        L = 2 * (M - 1)
        tail = np.swapaxes(cov_seq[M - 2:0:-1], 1, 2)
    else:
        L = 2 * M - 1
        tail = np.swapaxes(cov_seq[M - 1:0:-1], 1, 2)
    blocks = np.concatenate([cov_seq, tail], axis=0)
    assert blocks.shape[0] == L
    return blocks


def simulate_stationary(cov: CovarianceModel, grid: PathGrid, n_paths: int, master_seed: int,
                        method: str = "circulant", first_path: int = 0,
                        threads: int = 1) -> GaussianEnsemble:
    """Exact-in-law samples of a stationary Gaussian process on ``grid``.

    Circulant embedding is tried first; if it is not PSD (eigenvalue below
    ``-1e-10 * max``) dense Cholesky with ``1e-12`` jitter is used when the
    grid has at most 4096 nodes.

    Raises:
        SamplingInfeasibleError: embedding not PSD and grid too large for
            the dense fallback (or the dense factorisation fails).
    """
    if n_paths < 0:
        raise ParameterError("n_paths must be non-negative")
    n = cov.n
    M = grid.count
    lags = grid.step * np.arange(M)
    cseq = cov(lags)
    seeds = path_seeds(master_seed, first_path, n_paths)

    def empty():
        return GaussianEnsemble(grid, np.zeros((n_paths, M, n)), master_seed, seeds, method, first_path)

    if not np.any(cseq):
        return empty()

    used = method
    if method == "circulant":
        blocks = _embedding_blocks(cseq)
        root, mn, mx = _circulant_factors(blocks)
        if mn < -1e-10 * mx:
            if M <= 4096:
                used = "cholesky"
            else:
                raise SamplingInfeasibleError(
                    f"circulant embedding of {M} nodes is not PSD and exceeds the"
                    " Cholesky fallback limit (4096)", mn)
        else:
            L = blocks.shape[0]

            def work(start, stop):
                out = np.empty((stop - start, M, n))
                for k, i in enumerate(range(start, stop)):
                    rng = child_rng(master_seed, i)
                    xi = rng.standard_normal((L, n)) + 1j * rng.standard_normal((L, n))
                    v = np.einsum("fij,fj->fi", root, xi)
                    y = np.sqrt(L) * np.fft.ifft(v, axis=0)
                    out[k] = y[:M].real
                return out
    if used == "cholesky":
        big = np.zeros((M * n, M * n))
        for p in range(M):
            for q in range(p, M):
                blk = cseq[q - p]
                big[p * n:(p + 1) * n, q * n:(q + 1) * n] = blk
                big[q * n:(q + 1) * n, p * n:(p + 1) * n] = blk.T
        jitter = 1e-12 * max(float(np.mean(np.diag(big))), 1e-300)
        try:
            chol = np.linalg.cholesky(big + jitter * np.eye(M * n))
        except np.linalg.LinAlgError:
            mn = float(np.linalg.eigvalsh(big).min())
            raise SamplingInfeasibleError("dense covariance is not PSD within jitter", mn) from None

        def work(start, stop):
            out = np.empty((stop - start, M, n))
            for k, i in enumerate(range(start, stop)):
                rng = child_rng(master_seed, i)
                out[k] = (chol @ rng.standard_normal(M * n)).reshape(M, n)
            return out
    elif used != "circulant":
        raise ParameterError(f"unknown sampling method {method!r}")

    paths = _run_blocks(n_paths, first_path, threads, work)
    if paths is None:
        return empty()
    return GaussianEnsemble(grid, paths, master_seed, seeds, used, first_path)


def _cell_averages(prof: Profile, h: float, cells: int):
    """``(1/h) int_{mh}^{(m+1)h} k(u) du`` for m = 0..cells-1."""
    edges = h * np.arange(cells + 1)
    x, w = gauss_legendre(16)
    mids = 0.5 * (edges[:-1] + edges[1:])
    vals = (prof(mids[:, None] + 0.5 * h * x[None, :]) * w[None, :]).sum(axis=1) * 0.5
    special_pts = [s for s in set(prof.singular_points) | set(prof.kinks) if 0 <= s < edges[-1]]
    for s in special_pts:
        m = min(int(s // h), cells - 1)
        for mm in {m, max(m - 1, 0)}:
            a, b = edges[mm], edges[mm + 1]
            nodes, wts = halfline_nodes([s], a, b, 2)
            vals[mm] = prof(nodes) @ wts / h
    return vals


def simulate_moving_average(spec: KernelSpec, grid: PathGrid, truncation: float, n_paths: int,
                            master_seed: int, first_path: int = 0,
                            threads: int = 1) -> GaussianEnsemble:
    """Discrete convolution of cell-averaged kernel values with Wiener increments
    on ``[t0 - truncation, t1]``.

    The neglected tail energy ``int_T^inf |K_j|^2`` bounds the induced
    covariance error and is stored as ``truncation_bound`` (per row).
    """
    h = grid.step
    if truncation < h:
        raise ParameterError("truncation must be at least one grid step")
    cells = int(round(truncation / h))
    M = grid.count
    kbars = [(_cell_averages(p, h, cells), mix) for p, mix in spec.terms]
    bound = tail_energy(spec, cells * h)
    n, d = spec.n, spec.d
    seeds = path_seeds(master_seed, first_path, n_paths)

    def work(start, stop):
        out = np.zeros((stop - start, M, n))
        for k, i in enumerate(range(start, stop)):
            rng = child_rng(master_seed, i)
            dw = rng.standard_normal((cells + M - 1, d)) * math.sqrt(h)
            for kb, mix in kbars:
                if not np.any(kb) or not np.any(mix):
                    continue
                conv = fftconvolve(dw, kb[:, None], mode="valid", axes=0)
                out[k] += conv @ mix.T
        return out

    paths = _run_blocks(n_paths, first_path, threads, work)
    if paths is None:
        paths = np.zeros((0, M, n))
    return GaussianEnsemble(grid, paths, master_seed, seeds, f"moving_average({truncation})",
                            first_path, bound)


def empirical_lag_covariance(ens: GaussianEnsemble, lag_steps: int):
    """Estimate ``E[y_0 (x) y_lag]`` and its standard error.

    Averages over paths and over time shifts; the SE uses per-path averages,
    which are independent across paths.
    """
    y = ens.paths
    M = y.shape[1]
    if lag_steps >= M:
        raise ParameterError("lag beyond simulated span")
    prods = np.einsum("pti,ptj->pij", y[:, : M - lag_steps], y[:, lag_steps:]) / (M - lag_steps)
    mean = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / math.sqrt(max(y.shape[0], 1))
    return mean, se
