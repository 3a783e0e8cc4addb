"""Scaled additive functionals and their discrete second-order lifts.

An additive functional ``X^eps_t = sqrt(eps) int_0^{t/eps} G(y_s) ds`` is
integrated by the trapezoid rule on the fast grid. Its lift stores only the
left-point areas from time 0; every ``XX_{s,t}`` is rebuilt through Chen's
relation, which therefore holds to rounding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import GridError, ParameterError
from .volterra import PathGrid


@dataclass(frozen=True, eq=False)
class ScaledFunctionalPath:
    """``values`` has shape ``(..., count, N)`` (optional leading path axis)."""

    epsilon: float
    out_grid: PathGrid
    values: np.ndarray
    labels: tuple = ()
    source: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.values.shape[-1]

    def __getitem__(self, i) -> "ScaledFunctionalPath":
        src = None if self.source is None else self.source[i]
        return ScaledFunctionalPath(self.epsilon, self.out_grid, self.values[i], self.labels, src)


def _stride(fine_step, coarse_step):
    r = coarse_step / fine_step
    k = int(round(r))
    if k < 1 or abs(r - k) > 1e-9 * r:
        raise GridError(f"output step {coarse_step} is not a multiple of the fast step {fine_step}")
    return k


def scaled_path(g_values, fast_step: float, epsilon: float, out_grid: PathGrid,
                labels=(), source=None) -> ScaledFunctionalPath:
    """Trapezoid integral of ``G(y)`` sampled on the fast grid ``k * fast_step``.

    ``g_values`` has shape ``(..., count_fast, N)``; a 1-d array is read as a
    single component. The output grid lives in slow time and node ``t`` uses
    fast time ``t/eps``.
    """
    if not (0 < epsilon <= 1):
        raise ParameterError("epsilon must lie in (0, 1]")
    g = np.asarray(g_values, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if out_grid.t0 != 0.0:
        raise GridError("output grid must start at 0")
    stride = _stride(fast_step, out_grid.step / epsilon)
    need = (out_grid.count - 1) * stride + 1
    if g.shape[-2] < need:
        raise GridError(f"fast grid has {g.shape[-2]} nodes, {need} are needed to reach T/eps")
    g = g[..., :need, :]
    inc = 0.5 * fast_step * (g[..., 1:, :] + g[..., :-1, :])
    cum = np.zeros(g.shape)
    np.cumsum(inc, axis=-2, out=cum[..., 1:, :])
    vals = math.sqrt(epsilon) * cum[..., ::stride, :]
    return ScaledFunctionalPath(float(epsilon), out_grid, vals, tuple(labels), source)


@dataclass(frozen=True, eq=False)
class RoughLift:
    """Path ``X`` with areas ``area0[k] = XX_{0, t_k}`` (shape ``(..., count, N, N)``)."""

    base: ScaledFunctionalPath
    area0: np.ndarray

    @property
    def times(self):
        return self.base.out_grid.times

    def index(self, t) -> int:
        g = self.base.out_grid
        r = (t - g.t0) / g.step
        k = int(round(r))
        if k < 0 or k >= g.count or abs(r - k) > 1e-9 * max(1.0, abs(r)):
            raise GridError(f"time {t} is not a node of the output grid")
        return k

    def increment(self, i: int, j: int):
        X = self.base.values
        return X[..., j, :] - X[..., i, :]

    def area(self, i: int, j: int):
        """``XX_{t_i, t_j}`` rebuilt from the base-point areas via Chen."""
        X = self.base.values - self.base.values[..., :1, :]
        inc = X[..., j, :] - X[..., i, :]
        return self.area0[..., j, :, :] - self.area0[..., i, :, :] - X[..., i, :, None] * inc[..., None, :]

    def subsample(self, stride: int) -> "RoughLift":
        g = self.base.out_grid
        if (g.count - 1) % stride:
            raise GridError("stride must divide the number of grid steps")
        grid = PathGrid(g.t0, g.t1, g.step * stride, (g.count - 1) // stride + 1)
        base = ScaledFunctionalPath(self.base.epsilon, grid, self.base.values[..., ::stride, :],
                                    self.base.labels, self.base.source)
        return RoughLift(base, self.area0[..., ::stride, :, :])


def lift_discrete(path: ScaledFunctionalPath) -> RoughLift:
    """Left-point lift ``XX_{0,t_k} = sum_{j<k} X_{0,t_j} (x) (X_{t_{j+1}} - X_{t_j})``."""
    X = path.values - path.values[..., :1, :]
    dX = np.diff(X, axis=-2)
    terms = X[..., :-1, :, None] * dX[..., None, :]
    area = np.zeros(X.shape + (X.shape[-1],))
    np.cumsum(terms, axis=-3, out=area[..., 1:, :, :])
    return RoughLift(path, area)


def chen_defect(lift: RoughLift, s: float, u: float, t: float):
    """``XX_{s,t} - XX_{s,u} - XX_{u,t} - X_{s,u} (x) X_{u,t}`` at grid times."""
    i, j, k = lift.index(s), lift.index(u), lift.index(t)
    if not (i <= j <= k):
        raise GridError("need s <= u <= t")
    return chen_defect_idx(lift, i, j, k)


def chen_defect_idx(lift: RoughLift, i: int, j: int, k: int):
    a = lift.increment(i, j)
    b = lift.increment(j, k)
    return lift.area(i, k) - lift.area(i, j) - lift.area(j, k) - a[..., :, None] * b[..., None, :]


def _lags(count):
    if count <= 4096:
        return range(1, count)
    return sorted({2**k for k in range(int(math.log2(count - 1)) + 1)} | {count - 1})


def holder_seminorm(values, times, gamma: float) -> float:
    """``sup |X_t - X_s| / |t - s|^gamma`` over grid pairs.

    All pairs up to 4096 nodes; dyadic lags beyond (an estimator).
    """
    if not (0 < gamma <= 1):
        raise ParameterError("gamma must lie in (0, 1]")
    X = np.asarray(values, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    t = np.asarray(times, dtype=float)
    best = 0.0
    for lag in _lags(len(t)):
        d = np.linalg.norm(X[lag:] - X[:-lag], axis=-1)
        if d.size:
            best = max(best, float(np.max(d / (t[lag:] - t[:-lag]) ** gamma)))
    return best


def two_param_holder(lift: RoughLift, two_gamma: float) -> float:
    """``sup |XX_{s,t}| / |t - s|^{2 gamma}`` (Frobenius norm) for one path."""
    X = lift.base.values - lift.base.values[:1]
    A = lift.area0
    t = lift.times
    best = 0.0
    for lag in _lags(len(t)):
        inc = X[lag:] - X[:-lag]
        area = A[lag:] - A[:-lag] - X[:-lag, :, None] * inc[:, None, :]
        d = np.sqrt(np.sum(area**2, axis=(-1, -2)))
        if d.size:
            best = max(best, float(np.max(d / (t[lag:] - t[:-lag]) ** two_gamma)))
    return best


def export_lift_csv(lift: RoughLift, path) -> Path:
    """Write ``t, X1..XN, XX11..XXNN`` for a single-path lift."""
    X = lift.base.values
    if X.ndim != 2:
        raise ParameterError("export needs a single-path lift")
    N = X.shape[1]
    path = Path(path)
    header = ["t"] + [f"X{i + 1}" for i in range(N)] + [f"XX{i + 1}{j + 1}" for i in range(N) for j in range(N)]
    with path.open("w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, t in enumerate(lift.times):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in X[k]] + [f"{v:.17g}" for v in lift.area0[k].ravel()])
    return path
