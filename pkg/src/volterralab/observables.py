"""Named observables ``G : R^n -> R`` evaluated on arrays with the component
axis last."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ParameterError
from .hermite import MultiIndex, hermite_multi


@dataclass(frozen=True, eq=False)
class Observable:
    func: Callable
    n: int
    label: str

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.n:
            raise ParameterError(f"{self.label}: expected {self.n} components, got {y.shape[-1]}")
        return np.asarray(self.func(y), dtype=float)

    def __add__(self, other):
        return combination([(1.0, self), (1.0, other)])

    def __mul__(self, c):
        return combination([(float(c), self)])

    __rmul__ = __mul__


def hermite(ell) -> Observable:
    """``y -> H_l(y)`` in raw coordinates (use on normalised processes)."""
    ell = MultiIndex(ell)
    return Observable(lambda y: hermite_multi(ell, y), len(ell), f"H{tuple(ell)}")


def polynomial(terms: dict, n: int) -> Observable:
    """Sum of monomials ``coef * prod y_i^{e_i}`` with ``terms = {e: coef}``."""
    items = [(tuple(int(v) for v in e), float(c)) for e, c in terms.items()]
    for e, _ in items:
        if len(e) != n:
            raise ParameterError("monomial exponent length does not match n")

    def f(y):
        out = np.zeros(y.shape[:-1])
        for e, c in items:
            term = np.full(y.shape[:-1], c)
            for i, p in enumerate(e):
                if p:
                    term = term * y[..., i] ** p
            out = out + term
        return out
    return Observable(f, n, "polynomial")


def generating_function(a) -> Observable:
    """``exp(<y, a> - |a|^2 / 2)``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    half = 0.5 * float(a @ a)
    return Observable(lambda y: np.exp(y @ a - half), a.size, f"genfun({a.tolist()})")


def sinusoid(weights, phase: float = 0.0, amplitude: float = 1.0, kind: str = "sin") -> Observable:
    """``amplitude * sin(<w, y> + phase)`` (or cos)."""
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    fn = {"sin": np.sin, "cos": np.cos}.get(kind)
    if fn is None:
        raise ParameterError(f"unknown sinusoid kind {kind!r}")
    return Observable(lambda y: amplitude * fn(y @ w + phase), w.size, f"{kind}({w.tolist()})")


def constant(c: float, n: int = 1) -> Observable:
    return Observable(lambda y: np.full(y.shape[:-1], float(c)), n, f"const({c})")


def combination(parts) -> Observable:
    parts = [(float(c), g) for c, g in parts]
    n = {g.n for _, g in parts}
    if len(n) != 1:
        raise ParameterError("combined observables must share the dimension")

    def f(y):
        return sum(c * g(y) for c, g in parts)
    return Observable(f, n.pop(), " + ".join(f"{c}*{g.label}" for c, g in parts))


def from_config(block: dict, n: int, path: str = "observable") -> Observable:
    """Build an observable from a configuration block such as
    ``{"type": "hermite", "index": [2]}``."""
    if not isinstance(block, dict) or "type" not in block:
        raise ConfigError(f"{path}.type", "observable needs a 'type'")
    kind = block["type"]
    try:
        if kind == "hermite":
            ell = block["index"]
            if len(ell) != n:
                raise ConfigError(f"{path}.index", f"expected {n} entries")
            return hermite(ell)
        if kind == "polynomial":
            terms = {tuple(t["exponent"]): t["coef"] for t in block["terms"]}
            return polynomial(terms, n)
        if kind == "generating_function":
            a = block["a"]
            a = [a] if np.isscalar(a) else a
            if len(a) != n:
                raise ConfigError(f"{path}.a", f"expected {n} entries")
            return generating_function(a)
        if kind in ("sin", "cos"):
            w = block.get("weights", [1.0] * n)
            return sinusoid(w, block.get("phase", 0.0), block.get("amplitude", 1.0), kind)
        if kind == "constant":
            return constant(block["value"], n)
        if kind == "sum":
            return combination([(p.get("coef", 1.0), from_config(p["observable"], n, f"{path}.parts[{i}]"))
                                for i, p in enumerate(block["parts"])])
    except KeyError as exc:
        raise ConfigError(f"{path}.{exc.args[0]}", "missing field") from None
    raise ConfigError(f"{path}.type", f"unknown observable type {kind!r}")
