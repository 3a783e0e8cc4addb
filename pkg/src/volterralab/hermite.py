"""Hermite chaos tools for Gaussian vectors.

Probabilists' Hermite polynomials, normalisation of a Gaussian law to
independent unit components, chaos expansions of observables, diagram
(pairing) moments and the decay of conditional expectations of Hermite
polynomials of a Volterra process.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

from .errors import IntegrationError, NotPSDError, ParameterError, PreconditionError
from .quadrature import gauss_legendre, sparse_gauss_hermite, tensor_gauss_hermite

MAX_DEGREE = 60
PAIRING_GUARD = 16


# --------------------------------------------------------------------------- #
# polynomials and multi-indices
# --------------------------------------------------------------------------- #

def hermite_1d(m: int, x):
    """``H_m(x)`` by the recurrence ``H_{k+1} = x H_k - k H_{k-1}``."""
    if not (0 <= int(m) <= MAX_DEGREE) or int(m) != m:
        raise ParameterError(f"Hermite degree must be an integer in [0, {MAX_DEGREE}], got {m!r}")
    return hermite_table(int(m), x)[int(m)]


def hermite_table(max_m: int, x):
    """Array ``T`` with ``T[k] = H_k(x)`` for ``k = 0..max_m``."""
    x = np.asarray(x, dtype=float)
    out = np.empty((max_m + 1,) + x.shape)
    out[0] = 1.0
    if max_m >= 1:
        out[1] = x
    for k in range(1, max_m):
        out[k + 1] = x * out[k] - k * out[k - 1]
    return out


class MultiIndex(tuple):
    """Tuple of non-negative integers with exact order and factorial."""

    def __new__(cls, entries):
        entries = tuple(int(e) for e in entries)
        if any(e < 0 for e in entries):
            raise ParameterError(f"multi-index entries must be non-negative: {entries}")
        return super().__new__(cls, entries)

    @property
    def order(self) -> int:
        return sum(self)

    @property
    def factorial(self) -> int:
        return math.prod(math.factorial(e) for e in self)


def multi_indices(n: int, max_degree: int):
    """All n-dimensional multi-indices with ``|l| <= max_degree``, by degree."""
    out = []
    for deg in range(max_degree + 1):
        for combo in combinations_with_replacement(range(n), deg):
            ell = [0] * n
            for c in combo:
                ell[c] += 1
            out.append(MultiIndex(ell))
    return out


def hermite_multi(ell, x):
    """``prod_i H_{l_i}(x_i)``; ``x`` has the component axis last."""
    ell = MultiIndex(ell)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(ell):
        raise ParameterError(f"point dimension {x.shape[-1]} does not match multi-index length {len(ell)}")
    out = np.ones(x.shape[:-1])
    for i, m in enumerate(ell):
        if m:
            out = out * hermite_1d(m, x[..., i])
    return out


# --------------------------------------------------------------------------- #
# normalisation
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class Normalizer:
    """Map ``z = D^{-1/2} O^T y`` onto independent unit Gaussian components.

    ``O`` is ``n x m`` with orthonormal columns spanning the range of
    ``Sigma``; ``D`` holds the ``m`` positive eigenvalues.
    """

    O: np.ndarray
    D: np.ndarray
    sigma: np.ndarray

    @property
    def m(self) -> int:
        return self.D.shape[0]

    @property
    def inverse_map(self) -> np.ndarray:
        """Matrix ``A = D^{-1/2} O^T`` (m x n)."""
        return self.O.T / np.sqrt(self.D)[:, None]

    @property
    def forward_map(self) -> np.ndarray:
        """Matrix ``O D^{1/2}`` (n x m) taking z back to y."""
        return self.O * np.sqrt(self.D)[None, :]

    def to_z(self, y):
        return np.asarray(y) @ self.inverse_map.T

    def to_y(self, z):
        return np.asarray(z) @ self.forward_map.T

    def theta_hat(self, theta: float) -> float:
        """``|D^{-1/2} O^T|^2 theta`` with the spectral norm."""
        return float(np.linalg.norm(self.inverse_map, 2) ** 2 * theta)


def normalize_covariance(sigma) -> Normalizer:
    """Eigen-decompose ``Sigma``, dropping eigenvalues below ``1e-12 trace``.

    Raises:
        NotPSDError: asymmetric input or an eigenvalue below ``-1e-8 trace``.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    scale = max(float(np.max(np.abs(sigma))), 1e-300)
    if np.max(np.abs(sigma - sigma.T)) > 1e-10 * max(scale, 1.0):
        raise NotPSDError("covariance matrix is not symmetric")
    sym = 0.5 * (sigma + sigma.T)
    w, v = np.linalg.eigh(sym)
    tr = float(np.trace(sym))
    if tr <= 0 or w.min() < -1e-8 * tr:
        raise NotPSDError(f"covariance has eigenvalue {w.min():.3e} (trace {tr:.3e})")
    keep = w > 1e-12 * tr
    order = np.argsort(-w[keep], kind="stable")
    O = v[:, keep][:, order]
    D = w[keep][order]
    # deterministic sign: largest-magnitude entry of each column positive
    for k in range(O.shape[1]):
        if O[np.argmax(np.abs(O[:, k])), k] < 0:
            O[:, k] = -O[:, k]
    # exact identities where the input is already diagonal
    if np.allclose(sym, np.diag(np.diag(sym)), rtol=0, atol=0):
        O = np.zeros_like(O)
        idx = np.argsort(-np.diag(sym), kind="stable")[: D.size]
        for k, i in enumerate(idx):
            O[i, k] = 1.0
        D = np.diag(sym)[idx].copy()
    return Normalizer(O, D, sym)


# --------------------------------------------------------------------------- #
# expansions
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class HermiteExpansion:
    """Coefficients ``c_l`` with ``G(O D^{1/2} z) = sum_l c_l H_l(z)``.

    ``norm_sq`` is ``E[G^2]``; ``residual`` the Parseval mass beyond the cap.
    """

    coeffs: dict
    degree_cap: int
    sigma: np.ndarray
    normalizer: Normalizer
    quadrature_order: int
    norm_sq: float
    residual: float
    accuracy_warning: Optional[str] = None

    @property
    def m(self) -> int:
        return self.normalizer.m

    @property
    def rank(self):
        return rank(self)

    @property
    def coeff_tol(self) -> float:
        return 1e-9 * math.sqrt(max(self.norm_sq, 0.0))

    def items(self, tol: float = 0.0):
        return [(ell, c) for ell, c in self.coeffs.items() if abs(c) > tol]

    def evaluate_z(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.zeros(z.shape[:-1])
        tabs = hermite_table(self.degree_cap, z)
        for ell, c in self.coeffs.items():
            if c == 0.0:
                continue
            term = np.full(z.shape[:-1], c)
            for k, e in enumerate(ell):
                if e:
                    term = term * tabs[e][..., k]
            out += term
        return out

    def evaluate(self, y):
        """Truncated expansion at points ``y`` (component axis last)."""
        return self.evaluate_z(self.normalizer.to_z(y))

    def scaled(self, factor: float) -> "HermiteExpansion":
        return HermiteExpansion({k: factor * v for k, v in self.coeffs.items()}, self.degree_cap,
                                self.sigma, self.normalizer, self.quadrature_order,
                                factor**2 * self.norm_sq, factor**2 * self.residual,
                                self.accuracy_warning)


def _default_order(m, cap):
    base = {1: 60, 2: 40, 3: 24, 4: 16}.get(m, 0)
    return max(base, cap + 2)


def _gauss_rule(m, order):
    if m <= 4:
        return tensor_gauss_hermite(m, order)
    return sparse_gauss_hermite(m, 8)


def _coefficients(G, normalizer, cap, nodes, weights, indices):
    y = normalizer.to_y(nodes)
    vals = np.asarray(G(y), dtype=float).reshape(-1)
    if not np.all(np.isfinite(vals)):
        raise ParameterError("observable is not finite on the quadrature nodes")
    tabs = hermite_table(cap, nodes)  # (cap+1, Q, m)
    wg = weights * vals
    out = {}
    for ell in indices:
        p = wg.copy()
        for k, e in enumerate(ell):
            if e:
                p = p * tabs[e][:, k]
        out[ell] = float(p.sum()) / ell.factorial
    return out, float(weights @ vals**2)


def expand(G: Callable, sigma, degree_cap: int, quadrature_order: Optional[int] = None) -> HermiteExpansion:
    """Hermite expansion of ``G`` under ``N(0, Sigma)``.

    ``G`` maps points of shape ``(Q, n)`` to ``(Q,)``. Coefficients use the
    orthogonality normalisation ``c_l = <G, H_l> / l!``. The quadrature is
    re-run at a higher order and an accuracy warning is attached when any
    coefficient moves by more than ``1e-6``.
    """
    if degree_cap < 0 or degree_cap > MAX_DEGREE:
        raise ParameterError(f"degree_cap must lie in [0, {MAX_DEGREE}]")
    normalizer = normalize_covariance(sigma)
    m = normalizer.m
    if m > 4 and degree_cap > 8:
        raise ParameterError("sparse-grid expansions support degree_cap <= 8")
    order = _default_order(m, degree_cap) if quadrature_order is None else int(quadrature_order)
    indices = multi_indices(m, degree_cap)
    nodes, weights = _gauss_rule(m, order)
    coeffs, norm_sq = _coefficients(G, normalizer, degree_cap, nodes, weights, indices)

    # self-check at a refined rule (doubling while cheap, else +50%)
    warn = None
    if m <= 4:
        check_order = 2 * order if (2 * order) ** m <= 2_000_000 else int(1.5 * order) + 1
        if check_order**m <= 4_000_000:
            n2, w2 = tensor_gauss_hermite(m, check_order)
            c2, _ = _coefficients(G, normalizer, degree_cap, n2, w2, indices)
            worst = max(abs(c2[k] - coeffs[k]) for k in indices)
            if worst > 1e-6:
                warn = f"coefficients changed by {worst:.2e} on refining the quadrature"
    else:
        n2, w2 = sparse_gauss_hermite(m, 9)
        c2, _ = _coefficients(G, normalizer, degree_cap, n2, w2, indices)
        worst = max(abs(c2[k] - coeffs[k]) for k in indices)
        if worst > 1e-6:
            warn = f"sparse-grid coefficients changed by {worst:.2e} between levels 8 and 9"
    if warn:
        warnings.warn(warn, RuntimeWarning, stacklevel=2)
    captured = sum(c * c * ell.factorial for ell, c in coeffs.items())
    resid = max(norm_sq - captured, 0.0)
    return HermiteExpansion(coeffs, degree_cap, normalizer.sigma, normalizer, order, norm_sq, resid, warn)


def expansion_from_coefficients(coeffs: dict, sigma, degree_cap: Optional[int] = None) -> HermiteExpansion:
    """Expansion with prescribed coefficients (exact, no quadrature)."""
    normalizer = normalize_covariance(sigma)
    coeffs = {MultiIndex(k): float(v) for k, v in coeffs.items()}
    cap = max((k.order for k in coeffs), default=0) if degree_cap is None else degree_cap
    norm_sq = sum(c * c * k.factorial for k, c in coeffs.items())
    return HermiteExpansion(coeffs, cap, normalizer.sigma, normalizer, 0, norm_sq, 0.0)


def rank(exp: HermiteExpansion, coeff_tol: Optional[float] = None):
    """Smallest ``|l|`` with ``|c_l| > coeff_tol``; ``math.inf`` if none."""
    tol = exp.coeff_tol if coeff_tol is None else coeff_tol
    orders = [ell.order for ell, c in exp.coeffs.items() if abs(c) > tol]
    return min(orders) if orders else math.inf


@dataclass
class DecaySum:
    value: float
    converging: bool
    top_shell: float


def chaos_decay_sum(exp: HermiteExpansion, p: float) -> DecaySum:
    """``sum_l |c_l| (p-1)^{|l|/2} sqrt(l!)`` over the computed coefficients.

    Reported as diverging when the top degree shell still contributes at
    least ``1e-3`` of the total while Parseval mass remains beyond the cap.
    """
    if p <= 1:
        raise ParameterError("p must exceed 1")
    shells = np.zeros(exp.degree_cap + 1)
    for ell, c in exp.coeffs.items():
        shells[ell.order] += abs(c) * (p - 1) ** (ell.order / 2) * math.sqrt(ell.factorial)
    total = float(shells.sum())
    top = float(shells[-1]) if shells.size else 0.0
    tail_mass = exp.residual > 1e-10 * max(exp.norm_sq, 1e-300)
    diverging = total > 0 and top >= 1e-3 * total and tail_mass
    return DecaySum(total, not diverging, top)


# --------------------------------------------------------------------------- #
# pairings and diagrams
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class PairingGraph:
    """Multigraph on nodes with degrees ``node_degrees`` and no self-loops.

    ``multiplicity`` counts the leg-level pairings realising the graph.
    """

    node_degrees: tuple
    gamma: np.ndarray = field(compare=False)
    multiplicity: int = 1


def _multigraphs(degrees, allowed):
    """Yield (edge list [(i, j, g)], multiplicity) for every multigraph
    with the given degrees using only allowed edges (i < j)."""
    degrees = list(degrees)
    N = len(degrees)
    fact = math.prod(math.factorial(d) for d in degrees)

    def rec(i, rem, edges):
        while i < N and rem[i] == 0:
            i += 1
        if i == N:
            denom = math.prod(math.factorial(g) for _, _, g in edges)
            yield list(edges), fact // denom
            return
        partners = [j for j in range(i + 1, N) if rem[j] > 0 and allowed[i][j]]
        # distribute rem[i] legs of node i over later partners
        yield from dist(i, 0, partners, rem[i], rem, edges)

    def dist(i, k, partners, left, rem, edges):
        if left == 0:
            saved = rem[i]
            rem[i] = 0
            yield from rec(i + 1, rem, edges)
            rem[i] = saved
            return
        if k == len(partners):
            return
        j = partners[k]
        # capacity of the remaining partners bounds what must go here
        cap_rest = sum(rem[p] for p in partners[k + 1:])
        lo = max(0, left - cap_rest)
        for g in range(min(left, rem[j]), lo - 1, -1):
            if g:
                rem[j] -= g
                edges.append((i, j, g))
            yield from dist(i, k + 1, partners, left - g, rem, edges)
            if g:
                edges.pop()
                rem[j] += g

    if sum(degrees) % 2:
        return
    yield from rec(0, degrees[:], [])


def enumerate_pairings(ell) -> list:
    """All complete leg pairings without self-loops, grouped by multigraph."""
    ell = MultiIndex(ell)
    if ell.order > PAIRING_GUARD:
        raise ParameterError(f"|l| = {ell.order} exceeds the pairing guard {PAIRING_GUARD}")
    N = len(ell)
    allowed = [[True] * N for _ in range(N)]
    out = []
    for edges, mult in _multigraphs(ell, allowed):
        gamma = np.zeros((N, N), dtype=int)
        for i, j, g in edges:
            gamma[i, j] = gamma[j, i] = g
        out.append(PairingGraph(tuple(ell), gamma, mult))
    return out


def _pairing_sum(degrees, R):
    """``sum_graphs mult * prod_{i<j} R_ij^g`` using only edges with R != 0.

    ``R`` may carry leading batch axes.
    """
    degrees = [int(d) for d in degrees]
    R = np.asarray(R, dtype=float)
    keep = [i for i, d in enumerate(degrees) if d > 0]
    if not keep:
        return np.ones(R.shape[:-2])
    degrees = [degrees[i] for i in keep]
    R = R[..., keep, :][..., :, keep]
    N = len(degrees)
    nz = np.any(R != 0, axis=tuple(range(R.ndim - 2))) if R.ndim > 2 else (R != 0)
    allowed = [[bool(nz[i, j]) and i != j for j in range(N)] for i in range(N)]
    total = np.zeros(R.shape[:-2])
    for edges, mult in _multigraphs(degrees, allowed):
        term = np.full(R.shape[:-2], float(mult))
        for i, j, g in edges:
            term = term * R[..., i, j] ** g
        total = total + term
    return total


def diagram_expectation(ell, R):
    """``E[prod_i H_{l_i}(X_i)]`` for centred Gaussian X with covariance R
    (unit diagonal), by summing over pairings without self-loops."""
    ell = MultiIndex(ell)
    R = np.asarray(R, dtype=float)
    if R.shape[-1] != len(ell) or R.shape[-2] != len(ell):
        raise ParameterError("covariance shape does not match the multi-index")
    if ell.order > PAIRING_GUARD:
        raise ParameterError(f"|l| = {ell.order} exceeds the pairing guard {PAIRING_GUARD}")
    diag = np.diagonal(R, axis1=-2, axis2=-1)
    used = np.array([e > 0 for e in ell])
    if np.any(np.abs(diag[..., used] - 1.0) > 1e-10):
        raise PreconditionError("diagram formula needs unit variances")
    if ell.order % 2:
        return np.zeros(R.shape[:-2]) if R.ndim > 2 else 0.0
    val = _pairing_sum(ell, R)
    return val if R.ndim > 2 else float(val)


def cross_hermite_covariance(ell, k, R_lag):
    """``E[H_l(z_0) H_k(z_lag)]`` from the joint covariance of ``(z_0, z_lag)``.

    Each block must be the identity; the result vanishes unless
    ``|l| = |k|``.
    """
    ell = MultiIndex(ell)
    k = MultiIndex(k)
    R_lag = np.asarray(R_lag, dtype=float)
    n = len(ell)
    if len(k) != n or R_lag.shape[-2:] != (2 * n, 2 * n):
        raise ParameterError("joint covariance must be 2n x 2n for n-dimensional indices")
    eye = np.eye(n)
    if (np.max(np.abs(R_lag[..., :n, :n] - eye)) > 1e-8
            or np.max(np.abs(R_lag[..., n:, n:] - eye)) > 1e-8):
        raise PreconditionError("cross_hermite_covariance needs identity diagonal blocks")
    if ell.order != k.order:
        return np.zeros(R_lag.shape[:-2]) if R_lag.ndim > 2 else 0.0
    if ell.order == 0:
        return np.ones(R_lag.shape[:-2]) if R_lag.ndim > 2 else 1.0
    # intra-block edges are zero, so only cross edges survive
    full = np.zeros(R_lag.shape)
    full[..., :n, n:] = R_lag[..., :n, n:]
    full[..., n:, :n] = R_lag[..., n:, :n]
    val = _pairing_sum(tuple(ell) + tuple(k), full)
    return val if R_lag.ndim > 2 else float(val)


def joint_lag_covariance(C):
    """Joint covariance of ``(z_0, z_lag)`` from the normalised lag matrices
    ``C = E[z_0 (x) z_lag]`` of shape ``(..., m, m)``."""
    C = np.asarray(C, dtype=float)
    m = C.shape[-1]
    out = np.zeros(C.shape[:-2] + (2 * m, 2 * m))
    out[..., :m, :m] = np.eye(m)
    out[..., m:, m:] = np.eye(m)
    out[..., :m, m:] = C
    out[..., m:, :m] = np.swapaxes(C, -1, -2)
    return out


def chaos_cross_correlation(exp_i: HermiteExpansion, exp_j: HermiteExpansion, C, tol: float = 0.0):
    """``E[G_i(y_0) G_j(y_lag)] = sum_{l,k} c_l c_k E[H_l(z_0) H_k(z_lag)]``
    for a batch of normalised lag matrices ``C`` (L, m, m)."""
    C = np.asarray(C, dtype=float)
    R = joint_lag_covariance(C)
    n = C.shape[-1]
    out = np.zeros(C.shape[:-2])
    by_order = {}
    for ell, c in exp_j.items(tol):
        by_order.setdefault(ell.order, []).append((ell, c))
    for ell, ci in exp_i.items(tol):
        for k, cj in by_order.get(ell.order, []):
            if ell.order == 0:
                out = out + ci * cj
                continue
            full = np.zeros(R.shape)
            full[..., :n, n:] = R[..., :n, n:]
            full[..., n:, :n] = R[..., n:, :n]
            out = out + ci * cj * _pairing_sum(tuple(ell) + tuple(k), full)
    return out


# --------------------------------------------------------------------------- #
# conditional expectations
# --------------------------------------------------------------------------- #

@lru_cache(maxsize=32)
def _normalized_kernel(kernel):
    from .volterra import tail_gram

    sigma0 = tail_gram(kernel, 0.0)
    return normalize_covariance(sigma0)


def past_covariance(kernel, gap: float):
    """Covariance of the ``F_0``-measurable part of ``z_gap``:
    ``int_gap^inf Khat(u) Khat(u)^T du`` with ``Khat = D^{-1/2} O^T K``."""
    from .volterra import tail_gram

    A = _normalized_kernel(kernel).inverse_map
    return A @ tail_gram(kernel, gap) @ A.T


def _wick_norms(indices, S):
    """``||:Y^l:||_{L^2}`` for Y ~ N(0, S), the Wick power being the
    conditional expectation of the Hermite product of z."""
    out = []
    m = S.shape[-1]
    for ell in indices:
        if ell.order == 0:
            out.append(1.0)
            continue
        full = np.zeros((2 * m, 2 * m))
        full[:m, m:] = S
        full[m:, :m] = S.T
        out.append(math.sqrt(max(float(_pairing_sum(tuple(ell) + tuple(ell), full)), 0.0)))
    return np.array(out)


def conditional_hermite_norm(ell, gap: float, kernel) -> float:
    """``||E[H_l(z_gap) | F_0]||_{L^2}`` for the normalised Volterra process.

    The past parts of the components are jointly Gaussian with covariance
    ``past_covariance(kernel, gap)``; the conditional expectation of the
    Hermite product is their Wick product, whose second moment is a
    cross-pairing sum. With one component this is ``a^{|l|} sqrt(l!)`` where
    ``a^2`` is the normalised tail energy.
    """
    if gap < 0:
        raise ParameterError("gap must be non-negative")
    ell = MultiIndex(ell)
    if ell.order > PAIRING_GUARD // 2:
        raise ParameterError(f"|l| = {ell.order} exceeds the supported order {PAIRING_GUARD // 2}")
    S = past_covariance(kernel, gap)
    if len(ell) != S.shape[0]:
        raise ParameterError("multi-index length does not match the normalised dimension")
    return float(_wick_norms([ell], S)[0])


def fitted_theta_hat(kernel) -> float:
    """Smallest constant bounding the normalised row tail energies by
    ``theta (1 ^ t^{-2 beta})`` on a log grid (1% margin)."""
    from .volterra import decay_bound

    ts = np.concatenate([[0.0], np.logspace(-3, 6, 46), [1e12]])
    best = 0.0
    for t in ts:
        e = np.diag(past_covariance(kernel, t))
        best = max(best, float(np.max(e)) / float(decay_bound(1.0, kernel.beta, t)))
    return 1.01 * best


def conditional_norm_bound(ell, gap, kernel, theta_hat: Optional[float] = None) -> float:
    """``sqrt(l!) theta_hat^{|l|/2} (2n-1)^{|l|/2} (1 ^ gap^{-|l| beta / 2})``."""
    ell = MultiIndex(ell)
    th = fitted_theta_hat(kernel) if theta_hat is None else theta_hat
    n = len(ell)
    decay = 1.0 if gap <= 1 else gap ** (-ell.order * kernel.beta / 2)
    return math.sqrt(ell.factorial) * th ** (ell.order / 2) * (2 * n - 1) ** (ell.order / 2) * decay


def _decay_type(kernel):
    faster = {"exp_ou", "zero"}
    rates = []
    for prof, mix in kernel.terms:
        if not np.any(mix) or prof.variant == "zero":
            continue
        if prof.variant == "exp_ou":
            rates.append(prof.rate)
        elif math.isinf(prof.support_end):
            return "power", None
    return ("exponential", min(rates)) if rates else ("compact", None)


@dataclass
class ConditionalDecayReport:
    value: float
    finite: bool
    horizon: float
    tail_bound: float
    rank: float
    beta: float
    nominal_criterion: bool
    decay_type: str
    stable: bool


def _s_panels(horizon):
    edges = np.concatenate([[0.0], np.logspace(-4, np.log10(horizon), 60)])
    return edges[:-1], edges[1:]


def conditional_decay_integral(exp: HermiteExpansion, kernel, horizon: Optional[float] = None,
                               order: int = 16) -> ConditionalDecayReport:
    """Upper bound of ``int_0^inf ||E[G(y_s) | F_0]||_{L^2} ds``.

    Chaos-wise triangle inequality over the expansion, Gauss-Legendre in
    ``s`` up to ``horizon`` and an explicit tail bound beyond it (the
    kernel's own exponential envelope for exponential kernels, the power
    decay with exponent ``|l| beta / 2`` otherwise). ``finite`` requires a
    finite tail and a stable numeric integral; ``nominal_criterion`` is
    ``rank * beta > 2`` with the kernel's nominal beta.
    """
    terms = exp.items(exp.coeff_tol)
    r = rank(exp)
    kind, rate = _decay_type(kernel)
    beta = kernel.beta
    nominal = bool(r * beta > 2) if terms else True
    if not terms:
        return ConditionalDecayReport(0.0, True, 0.0, 0.0, r, beta, nominal, kind, True)
    if horizon is None:
        horizon = 60.0 / rate if kind == "exponential" else (10.0 if kind == "compact" else 1e4)
    indices = [ell for ell, _ in terms]
    absc = np.array([abs(c) for _, c in terms])

    def integral(q):
        x, w = gauss_legendre(q)
        lo, hi = _s_panels(horizon)
        total = 0.0
        for a, b in zip(lo, hi):
            s = 0.5 * (a + b) + 0.5 * (b - a) * x
            vals = np.array([absc @ _wick_norms(indices, past_covariance(kernel, si)) for si in s])
            total += 0.5 * (b - a) * float(w @ vals)
        return total

    value = integral(order)
    check = integral(order + 8)
    stable = abs(check - value) <= 1e-6 * max(abs(check), 1e-300)
    value = check

    # tail beyond the horizon
    S_h = past_covariance(kernel, horizon)
    top = float(np.max(np.diag(S_h))) if S_h.size else 0.0
    n = S_h.shape[0]
    tail = 0.0
    for ell, c in zip(indices, absc):
        if ell.order == 0:
            tail = math.inf
            break
        lead = c * math.sqrt(ell.factorial) * (2 * n - 1) ** (ell.order / 2)
        if kind == "compact":
            continue
        if kind == "exponential":
            # tail energies decay at least like exp(-2 rate s) past the horizon
            tail += lead * top ** (ell.order / 2) / (ell.order * rate)
        else:
            th = fitted_theta_hat(kernel)
            p = ell.order * beta / 2
            if p <= 1:
                tail = math.inf
                break
            tail += lead * th ** (ell.order / 2) * horizon ** (1 - p) / (p - 1)
    finite = stable and math.isfinite(tail)
    return ConditionalDecayReport(value + (tail if math.isfinite(tail) else 0.0), finite, horizon,
                                  tail, r, beta, nominal, kind, stable)


def sufficient_condition_check(exp: HermiteExpansion, kernel):
    """Rank criterion plus fast chaos decay with parameter
    ``theta_hat (2n - 1) + 1``."""
    th = fitted_theta_hat(kernel)
    n = exp.m
    p = th * (2 * n - 1) + 1
    decay = chaos_decay_sum(exp, p)
    r = rank(exp)
    return {"rank": r, "beta": kernel.beta, "rank_criterion": bool(r * kernel.beta > 2),
            "p": p, "decay_sum": decay.value, "decay_converging": decay.converging,
            "theta_hat": th}
