"""Quadrature rules: composite Gauss-Legendre on the half line and
Gauss-Hermite product / sparse rules for Gaussian expectations."""

from functools import lru_cache
from itertools import product
from math import comb

import numpy as np

from .errors import IntegrationError


@lru_cache(maxsize=64)
def gauss_legendre(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


def _graded_offsets(length, ratio, depth):
    """Panel edges on ``[0, length]`` graded geometrically toward 0."""
    inner = [length * ratio**k for k in range(depth, 0, -1)]
    return np.unique(np.asarray([0.0] + inner + [length]))


def halfline_nodes(breakpoints, lower, upper, level, local=False):
    """Nodes and weights for ``[lower, upper]`` with singular ``breakpoints``.

    Between consecutive breakpoints panels are graded geometrically toward
    both ends (deep enough for integrable singularities as strong as
    ``|t - a|^{-0.9}``); past the last breakpoint the panels double in length,
    which keeps the rule efficient for power-law tails reaching ``upper``.

    With ``local=True`` the nodes are returned as ``(anchor, offset)`` pairs,
    ``node = anchor + offset``, where offsets next to a breakpoint are exact
    even when far below the resolution of ``anchor``.
    """
    order = 12 + 6 * level
    depth = 60 * (level + 1)
    ratio = 0.2
    bps = sorted({float(b) for b in breakpoints if lower < b < upper} | {float(lower)})
    last = bps[-1]
    bps.append(min(last + 1.0, upper))
    x, w = gauss_legendre(order)
    anchors, offsets, weights = [], [], []

    def add(anchor, lo, hi):
        half = 0.5 * (hi - lo)
        off = (0.5 * (hi + lo))[:, None] + half[:, None] * x[None, :]
        anchors.append(np.full(off.size, anchor))
        offsets.append(off.ravel())
        weights.append((np.abs(half)[:, None] * w[None, :]).ravel())

    for a, b in zip(bps[:-1], bps[1:]):
        if b > a:
            half = 0.5 * (b - a)
            e = _graded_offsets(half, ratio, depth)
            add(a, e[:-1], e[1:])
            add(b, -e[:-1], -e[1:])
    start = bps[-1]
    k = 0
    while start < upper:
        end = min(last + 2.0 ** (k + 1), upper)
        # split each doubling panel so refinement also reaches the far field
        e = np.linspace(start, end, level + 2)
        add(0.0, e[:-1], e[1:])
        start = end
        k += 1
    anchors = np.concatenate(anchors)
    offsets = np.concatenate(offsets)
    weights = np.concatenate(weights)
    if local:
        return anchors, offsets, weights
    return anchors + offsets, weights


def integrate_halfline(func, breakpoints=(), lower=0.0, upper=np.inf, remainder=None,
                       rtol=1e-10, atol=1e-300, max_level=4, far=1e30, local=False):
    """Integrate ``func`` over ``[lower, upper)``.

    ``func`` maps a 1-d node array (or ``(anchor, offset)`` arrays when
    ``local``) to values with the node axis last. ``remainder(S)`` returns
    the analytic contribution of ``[S, inf)`` and is used only when ``upper``
    is infinite; the numeric part then stops at ``far``.

    Returns:
        (value, residual) where residual is the last change on refinement.

    Raises:
        IntegrationError: refinement did not settle to ``rtol``.
    """
    top = far if np.isinf(upper) else upper
    tail = 0.0
    if np.isinf(upper) and remainder is not None:
        tail = remainder(top)
    prev = None
    residual = np.inf
    for level in range(max_level + 1):
        anchors, offsets, weights = halfline_nodes(breakpoints, lower, top, level, local=True)
        vals = func(anchors, offsets) if local else func(anchors + offsets)
        vals = np.asarray(vals, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise IntegrationError("integrand is not finite on the quadrature nodes", np.inf)
        cur = vals @ weights + tail
        if prev is not None:
            residual = float(np.max(np.abs(cur - prev)))
            scale = float(np.max(np.abs(cur)))
            if residual <= rtol * scale + atol:
                return cur, residual
        prev = cur
    raise IntegrationError("panel refinement did not converge", residual)


# Gaussian expectations -------------------------------------------------------

@lru_cache(maxsize=64)
def gauss_hermite_1d(order: int):
    """Probabilists' Gauss-Hermite rule with weights summing to one."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / np.sqrt(2.0 * np.pi)


def tensor_gauss_hermite(dim: int, order: int):
    """Product rule for ``N(0, id)`` on R^dim: nodes (Q, dim), weights (Q,)."""
    x, w = gauss_hermite_1d(order)
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return nodes, weights


def sparse_gauss_hermite(dim: int, level: int):
    """Smolyak combination of Gauss-Hermite rules with 1-d orders 2i-1.

    Weights may be negative; duplicate nodes are merged.
    """
    q = level + dim - 1
    acc = {}
    for idx in product(range(1, level + 1), repeat=dim):
        s = sum(idx)
        if s < q - dim + 1 or s > q:
            continue
        coef = (-1) ** (q - s) * comb(dim - 1, q - s)
        rules = [gauss_hermite_1d(2 * i - 1) for i in idx]
        for combo in product(*[range(len(r[0])) for r in rules]):
            pt = tuple(round(float(rules[k][0][c]), 14) for k, c in enumerate(combo))
            wt = coef * np.prod([rules[k][1][c] for k, c in enumerate(combo)])
            acc[pt] = acc.get(pt, 0.0) + wt
    nodes = np.array(list(acc.keys()), dtype=float)
    weights = np.array(list(acc.values()), dtype=float)
    keep = np.abs(weights) > 1e-300
    return nodes[keep], weights[keep]
