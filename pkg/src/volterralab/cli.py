"""Configuration-driven experiment runner.

``volterralab --config run.json [--out DIR] [--threads K] [--check]``

Exit status: 0 when every configured check passes, 2 when a check fails,
1 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import homogenize as hm
from . import limits as lm
from . import volterra as vt
from .errors import ConfigError, VolterraLabError
from .hermite import chaos_decay_sum, expand, rank
from .observables import from_config as observable_from_config

KINDS = ("simulate", "expand", "limits", "clt", "area", "homogenize", "npoint")
MEMORY_LIMIT = 8 * 2**30


# --------------------------------------------------------------------------- #
# config access
# --------------------------------------------------------------------------- #

def _get(block: dict, key: str, path: str, default: Any = ..., kind=None):
    if not isinstance(block, dict):
        raise ConfigError(path, "expected an object")
    if key not in block:
        if default is ...:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
        return default
    value = block[key]
    if kind is not None and value is not None:
        try:
            value = kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.{key}" if path else key, f"expected {kind.__name__}") from None
    return value


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(str(path), "top level must be an object")
    cfg.setdefault("_base", str(path.resolve().parent))
    return cfg


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    blob = json.dumps(clean, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


def validate(cfg: dict) -> dict:
    """Check presence of the blocks each kind needs; returns the numeric block."""
    kind = _get(cfg, "kind", "")
    if kind not in KINDS:
        raise ConfigError("kind", f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    seed = _get(cfg, "seed", "")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", "seed must be a non-negative integer")
    _get(cfg, "kernel", "")
    if kind in ("homogenize", "npoint"):
        _get(cfg, "field", "")
    elif kind != "simulate":
        obs = _get(cfg, "observables", "")
        if not isinstance(obs, list) or not obs:
            raise ConfigError("observables", "expected a non-empty list")
    numeric = _get(cfg, "numeric", "", {})
    if not isinstance(numeric, dict):
        raise ConfigError("numeric", "expected an object")
    return numeric


def build_kernel(block: dict, base: str, path: str = "kernel") -> vt.KernelSpec:
    kind = _get(block, "type", path)
    common = {"beta": _get(block, "beta", path, None, float), "theta": _get(block, "theta", path, None, float),
              "mixing": _get(block, "mixing", path, None)}
    try:
        if kind == "exp_ou":
            beta = common.pop("beta")
            return vt.exp_ou(_get(block, "rate", path, 1.0, float), _get(block, "scale", path, 1.0, float),
                             bool(_get(block, "unit_variance", path, False)),
                             beta=1.0 if beta is None else beta, **common)
        if kind == "fbm_increment":
            return vt.fbm_increment(_get(block, "hurst", path, kind=float), _get(block, "c_h", path, None, float),
                                    **common)
        if kind == "fou":
            return vt.fou(_get(block, "hurst", path, kind=float), _get(block, "c_h", path, None, float), **common)
        if kind == "tabulated":
            fname = _get(block, "file", path)
            fpath = Path(fname)
            if not fpath.is_absolute():
                fpath = Path(base) / fpath
            if not fpath.exists():
                raise ConfigError(f"{path}.file", f"tabulated kernel file not found: {fpath}")
            return vt.tabulated_from_csv(fpath, tail_exponent=_get(block, "tail_exponent", path, None, float),
                                         **common)
        if kind == "sum":
            parts = _get(block, "parts", path)
            return vt.kernel_sum(*[build_kernel(p, base, f"{path}.parts[{i}]") for i, p in enumerate(parts)],
                                 beta=common["beta"], theta=common["theta"])
    except VolterraLabError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(f"{path}.type", f"unknown kernel type {kind!r}")


def _needs_table(spec: vt.KernelSpec) -> bool:
    return any(p.variant not in ("exp_ou", "fbm_increment", "zero") for p, _ in spec.terms)


def build_covariance(spec: vt.KernelSpec, numeric: dict) -> vt.CovarianceModel:
    max_lag = None
    if _needs_table(spec):
        max_lag = float(numeric.get("max_lag", 100.0))
    return vt.covariance_model(spec, max_lag=max_lag, lag_step=float(numeric.get("lag_step", 0.05)))


def build_observables(cfg: dict, n: int):
    return [observable_from_config(b, n, f"observables[{i}]") for i, b in enumerate(cfg["observables"])]


def build_field(block: dict, sigma, n: int) -> hm.FieldModel:
    d = int(_get(block, "d", "field", 1))
    terms = []
    for i, t in enumerate(_get(block, "terms", "field")):
        path = f"field.terms[{i}]"
        factors = []
        for k, fb in enumerate(_get(t, "factors", path, [])):
            fp = f"{path}.factors[{k}]"
            kind = _get(fb, "kind", fp)
            if kind not in ("sin", "cos", "poly", "bump", "const"):
                raise ConfigError(f"{fp}.kind", f"unknown spatial factor {kind!r}")
            coord = int(_get(fb, "coord", fp, 0))
            if not 0 <= coord < d:
                raise ConfigError(f"{fp}.coord", f"coordinate must lie in [0, {d})")
            factors.append(hm.Factor(kind, coord, float(fb.get("freq", 1.0)), float(fb.get("phase", 0.0)),
                                     float(fb.get("amp", 1.0)), tuple(float(c) for c in fb.get("coeffs", ())),
                                     float(fb.get("radius", 1.0))))
        comp = int(_get(t, "component", path, 0))
        if not 0 <= comp < d:
            raise ConfigError(f"{path}.component", f"component must lie in [0, {d})")
        G = observable_from_config(_get(t, "observable", path), n, f"{path}.observable")
        terms.append(hm.FieldTerm(comp, tuple(factors), G))
    return hm.field_sum(*terms, sigma=sigma, d=d, degree_cap=int(block.get("degree_cap", 8)),
                        support_radius=block.get("support_radius"))


# --------------------------------------------------------------------------- #
# output
# --------------------------------------------------------------------------- #

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


def write_report(path: Path, report: dict) -> Path:
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")
    return path


def _matrix_rows(name, M, se=None):
    M = np.atleast_2d(M)
    rows = []
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            rows.append((name, i, j, float(M[i, j]), float(se[i, j]) if se is not None else float("nan")))
    return rows


# --------------------------------------------------------------------------- #
# experiment kinds
# --------------------------------------------------------------------------- #

class Run:
    def __init__(self, cfg: dict, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.numeric = validate(cfg)
        self.seed = int(cfg["seed"])
        self.checks: dict = {}
        self.seeds = {"master": self.seed}
        self.tol = cfg.get("tolerances", {})
        self.spec = build_kernel(cfg["kernel"], cfg.get("_base", "."))
        self.cov = build_covariance(self.spec, self.numeric)

    def num(self, key, default=..., kind=float):
        return _get(self.numeric, key, "numeric", default, kind)

    # ---- simulate -------------------------------------------------------- #
    def simulate(self):
        T, step = self.num("T", 10.0), self.num("step", 0.05)
        n_paths = self.num("n_paths", 4, int)
        grid = vt.PathGrid.span(0.0, T, step)
        method = self.numeric.get("method", "circulant")
        if method == "moving_average":
            ens = vt.simulate_moving_average(self.spec, grid, self.num("truncation", 40.0), n_paths, self.seed,
                                             threads=self.threads)
        else:
            ens = vt.simulate_stationary(self.cov, grid, n_paths, self.seed, threads=self.threads)
        n = self.cov.n
        rows = ((p, t, *ens.paths[p, k]) for p in range(n_paths) for k, t in enumerate(grid.times))
        write_csv(self.out / "paths.csv", ["path_id", "t"] + [f"y{i + 1}" for i in range(n)], rows)
        lags = range(0, min(grid.count - 1, int(self.num("max_lag_steps", 20, int))) + 1)
        crow = []
        worst = 0.0
        for L in lags:
            est, se = vt.empirical_lag_covariance(ens, L)
            model = self.cov(np.array([L * step]))[0]
            for i in range(n):
                for j in range(n):
                    s = se[i, j]
                    z = abs(est[i, j] - model[i, j]) / s if s > 0 else 0.0
                    worst = max(worst, z)
                    crow.append((L * step, i, j, model[i, j], est[i, j], s))
        write_csv(self.out / "covariance.csv", ["lag", "i", "j", "model", "empirical", "se"], crow)
        tail = vt.tail_energy_check(self.spec, np.array(self.numeric.get("tail_grid", [0.0, 1.0, 10.0, 100.0])))
        self.checks["tail_energy"] = bool(tail.passes)
        if n_paths > 1:
            self.checks["empirical_covariance"] = bool(worst <= float(self.tol.get("z", 5.0)))
        self.seeds["paths"] = [int(s) for s in ens.per_path_seeds[:8]]

    # ---- expand ---------------------------------------------------------- #
    def expand(self):
        obs = build_observables(self.cfg, self.cov.n)
        cap = self.num("degree_cap", 8, int)
        rows, summary = [], []
        for k, G in enumerate(obs):
            e = expand(G, self.cov.sigma0, cap, self.numeric.get("quadrature_order"))
            for ell, c in sorted(e.coeffs.items()):
                rows.append((k, " ".join(str(v) for v in ell), ell.order, c))
            r = rank(e)
            summary.append((k, G.label, r if math.isfinite(r) else "inf", e.norm_sq, e.residual,
                            int(e.accuracy_warning is not None)))
            self.checks[f"quadrature_stable[{k}]"] = e.accuracy_warning is None
        write_csv(self.out / "coefficients.csv", ["observable", "index", "order", "coefficient"], rows)
        write_csv(self.out / "expansion_summary.csv",
                  ["observable", "label", "rank", "norm_sq", "residual", "accuracy_warning"], summary)

    # ---- shared helpers --------------------------------------------------- #
    def _expansions(self, obs):
        return lm.expansions_for(obs, self.cov.sigma0, self.num("degree_cap", 8, int))

    def _flags(self, exps):
        sp = self.spec.variant == "exp_ou"
        return lm.regime_flags([rank(e) for e in exps], self.spec.beta, sp)

    def _limit(self, exps):
        return lm.chaos_limit_matrices(exps, self.cov, self.num("horizon", 20.0), self.num("dr", 1e-3))

    def _write_limits(self, L: lm.LimitMatrices):
        rows = (_matrix_rows("lambda", L.lam) + _matrix_rows("upsilon2", L.upsilon2) + _matrix_rows("xi", L.xi)
                + _matrix_rows("upsilon", L.upsilon))
        write_csv(self.out / "limit_matrices.csv", ["quantity", "i", "j", "value", "se"], rows)
        write_csv(self.out / "xi.csv", ["i", "j", "value"],
                  [(i, j, L.xi[i, j]) for i in range(L.N) for j in range(L.N)])

    # ---- limits ---------------------------------------------------------- #
    def limits(self):
        obs = build_observables(self.cfg, self.cov.n)
        exps = self._expansions(obs)
        L = self._limit(exps)
        self._write_limits(L)
        defects = L.algebra_defects()
        self.checks["algebra"] = bool(L.algebra_ok())
        report = {"defects": defects, "horizon": L.horizon, "regime": self._flags(exps)}
        n_paths = self.num("n_paths", 0, int)
        if n_paths > 0:
            step = self.num("step", 0.05)
            span = self.num("span", 200.0)
            lag_steps = int(round(self.num("horizon", 20.0) / step))
            grid = vt.PathGrid.span(0.0, span, step)
            ens = vt.simulate_stationary(self.cov, grid, n_paths, self.seed, threads=self.threads)
            lc = lm.lag_correlation(obs, ens, exps, self.cov, lag_steps)
            mcL = lm.limit_matrices(lc)
            rows = []
            for name, est in (("lambda", mcL.lam), ("upsilon2", mcL.upsilon2), ("xi", mcL.xi)):
                rows += _matrix_rows(name, est, np.asarray(mcL.se[name]) if mcL.se else None)
            write_csv(self.out / "limit_matrices_mc.csv", ["quantity", "i", "j", "value", "se"], rows)
            self.checks["lag_correlation_agreement"] = bool(lc.agree)
            report["lag_correlation_max_z"] = lc.max_z
        write_report(self.out / "limits_report.json", report)

    # ---- clt / area ------------------------------------------------------- #
    def _ensemble(self, obs, with_lift):
        eps = self.numeric.get("epsilon", [1e-3])
        eps = float(eps[0] if isinstance(eps, list) else eps)
        return lm.functional_ensemble(self.cov, obs, eps, self.num("T", 1.0), self.num("out_step", 0.25),
                                      self.num("fast_step", 0.05), self.num("n_paths", 2000, int), self.seed,
                                      with_lift=with_lift, threads=self.threads)

    def _holder_exponent(self):
        """Admissible Hoelder exponent 1/2 - 1/p for the configured p (None when p <= 2)."""
        p = float(self.numeric.get("p", 2.0))
        return {"p": p, "gamma": 0.5 - 1.0 / p if p > 2 else None}

    def clt(self):
        obs = build_observables(self.cfg, self.cov.n)
        exps = self._expansions(obs)
        L = self._limit(exps)
        ens = self._ensemble(obs, False)
        flags = self._flags(exps)
        rep = lm.clt_report(ens.values, ens.out_grid.times, L.upsilon2, flags,
                            float(self.tol.get("z", 4.0)), float(self.tol.get("ks_alpha", 1e-3)))
        rows = []
        for e in rep["per_time"]:
            cov = np.asarray(e["cov"])
            se = np.asarray(e["se"])
            tgt = np.asarray(e["target"])
            for i in range(cov.shape[0]):
                for j in range(cov.shape[1]):
                    rows.append((e["t"], i, j, cov[i, j], se[i, j], tgt[i, j], e["min_ks_p"], int(e["pass"])))
        write_csv(self.out / "clt_report.csv", ["t", "i", "j", "cov", "se", "target", "min_ks_p", "pass"], rows)
        self._write_limits(L)
        rep["holder_exponent"] = self._holder_exponent()
        write_report(self.out / "clt_report.json", rep)
        self.checks["clt"] = bool(rep["pass"])
        self.checks["regime"] = bool(flags["effective"]["clt"])

    def area(self):
        obs = build_observables(self.cfg, self.cov.n)
        exps = self._expansions(obs)
        L = self._limit(exps)
        ens = self._ensemble(obs, True)
        T = float(ens.out_grid.times[-1])
        rep = lm.area_report(ens.area0[:, -1], T, L.lam, L.xi, float(self.tol.get("z", 4.0)))
        rows = lm.report_rows("area", rep["mean"], rep["se"], rep["target"])
        rows += lm.report_rows("area_anti", rep["anti_mean"], rep["anti_se"], rep["anti_target"])
        write_csv(self.out / "area_report.csv", ["quantity", "estimate", "se", "target", "z"], rows)
        rep["holder_exponent"] = self._holder_exponent()
        write_report(self.out / "area_report.json", rep)
        self.checks["area"] = bool(rep["pass"])

    # ---- homogenize / npoint ---------------------------------------------- #
    def _field_model(self):
        field = build_field(self.cfg["field"], self.cov.sigma0, self.cov.n)
        g = self.numeric.get("grid", {})
        d = field.d
        lows = g.get("low", [-math.pi - 0.5] * d)
        highs = g.get("high", [1.5 * math.pi + 0.5] * d)
        counts = g.get("count", [301] * d)
        grid = hm.uniform_grid(lows, highs, counts)
        model = hm.effective_coefficients(field, self.cov, grid, self.num("horizon", 20.0), self.num("dr", 1e-3),
                                          mc_paths=self.num("mc_paths", 0, int),
                                          master_seed=self.seed + 1)
        return field, model

    def _write_model(self, model: hm.EffectiveModel):
        pts = model.grid.points
        d = model.grid.d
        rows = [(*pts[a], *model.gamma[a], *[model.sigma[a, a, i, j] for i in range(d) for j in range(d)])
                for a in range(len(pts))]
        header = ([f"x{i + 1}" for i in range(d)] + [f"gamma{j + 1}" for j in range(d)]
                  + [f"sigma{i + 1}{j + 1}" for i in range(d) for j in range(d)])
        write_csv(self.out / "effective_model.csv", header, rows)

    def homogenize(self):
        field, model = self._field_model()
        self._write_model(model)
        x0 = np.atleast_1d(np.asarray(self.numeric.get("x0", [1.0] * field.d), dtype=float))
        T = self.num("T", 1.0)
        n_paths = self.num("n_paths", 2000, int)
        fast_step = self.num("fast_step", 0.05)
        dt = self.num("dt", 1e-3)
        eps_list = self.numeric.get("epsilon", [1e-1, 1e-3])
        eps_list = [float(e) for e in (eps_list if isinstance(eps_list, list) else [eps_list])]
        cond = hm.field_condition_check(field, self.spec.beta, self.cov.theta_hat or 1.0,
                                        float(self.numeric.get("p", 2.0)), model.grid.points[::10],
                                        super_polynomial=self.spec.variant == "exp_ou")
        limit_seed = self.seed + 2
        self.seeds["limit"] = limit_seed
        lim = hm.kunita_npoint_euler(model, x0[None, :], T, dt, n_paths, limit_seed).x[:, -1, 0, :]
        reports = {}
        rows = []
        for k, eps in enumerate(eps_list):
            s = self.seed + 10 + k
            self.seeds[f"fast_slow[{eps:g}]"] = s
            sp = hm.fast_slow_ensemble(field, self.cov, eps, T, x0, fast_step, n_paths, s,
                                       substep=float(self.numeric.get("substep", 1.0)), threads=self.threads)
            xe = sp.x[:, -1, :]
            rep = hm.limit_flow_compare(xe, lim, seed=self.seed,
                                        bias=float(self.tol.get("bias", 0.05)), threshold=float(self.tol.get("z", 4.0)))
            rep["blown_up"] = int(sp.blown_up.sum())
            reports[f"{eps:g}"] = rep
            for c, cr in enumerate(rep["coordinates"]):
                rows.append((eps, c, cr["mean_a"], cr["mean_b"], cr["mean_se"], cr["var_a"], cr["var_b"],
                             cr["var_se"], rep["energy"]["energy"], rep["energy"]["null_sd"],
                             rep["energy"]["pvalue"]))
            write_csv(self.out / f"slow_samples_eps{k}.csv", ["path_id", "t"] + [f"x{i + 1}" for i in range(field.d)],
                      ((p, T, *xe[p]) for p in range(n_paths)))
        write_csv(self.out / "limit_samples.csv", ["path_id", "t"] + [f"x{i + 1}" for i in range(field.d)],
                  ((p, T, *lim[p]) for p in range(n_paths)))
        write_csv(self.out / "homogenize_report.csv",
                  ["epsilon", "coord", "mean_eps", "mean_limit", "mean_se", "var_eps", "var_limit", "var_se",
                   "energy", "energy_sd", "energy_p"], rows)
        write_report(self.out / "homogenize_report.json", {"condition": cond, "comparisons": reports,
                                                            "consistency": model.consistency})
        small = min(eps_list)
        self.checks["moments"] = bool(reports[f"{small:g}"]["moments_ok"])
        self.checks["condition"] = bool(cond["passes"])
        if len(eps_list) > 1:
            big = max(eps_list)
            e_s, e_b = reports[f"{small:g}"]["energy"], reports[f"{big:g}"]["energy"]
            se = math.hypot(e_s["null_sd"], e_b["null_sd"])
            self.checks["energy_trend"] = bool(e_s["energy"] <= e_b["energy"] + 2 * se)

    def npoint(self):
        field, model = self._field_model()
        self._write_model(model)
        pts = np.atleast_2d(np.asarray(_get(self.numeric, "points", "numeric"), dtype=float))
        if pts.shape[1] != field.d:
            raise ConfigError("numeric.points", f"each point needs {field.d} coordinates")
        T, dt = self.num("T", 1.0), self.num("dt", 1e-3)
        n_paths = self.num("n_paths", 500, int)
        every = max(1, int(round(self.num("store_step", T) / dt)))
        run = hm.kunita_npoint_euler(model, pts, T, dt, n_paths, self.seed, store_every=every)
        rows = ((p, a, t, *run.x[p, k, a]) for p in range(n_paths) for k, t in enumerate(run.times)
                for a in range(len(pts)))
        write_csv(self.out / "npoint_trajectories.csv",
                  ["path_id", "point", "t"] + [f"x{i + 1}" for i in range(field.d)], rows)
        single = hm.kunita_npoint_euler(model, pts[:1], T, dt, n_paths, self.seed + 1).x[:, -1, 0, :]
        self.seeds["single_point"] = self.seed + 1
        cmp = hm.limit_flow_compare(run.x[:, -1, 0, :], single, seed=self.seed)
        write_report(self.out / "npoint_report.json", {"marginal": cmp, "max_dropped_pivot": run.max_dropped})
        self.checks["marginal"] = bool(cmp["energy"]["pvalue"] >= float(self.tol.get("energy_p", 0.01)))

    def execute(self):
        getattr(self, self.cfg["kind"])()


# --------------------------------------------------------------------------- #
# dry run
# --------------------------------------------------------------------------- #

def describe(cfg: dict) -> dict:
    """Resolved grids, memory/time estimates and regime arithmetic; no sampling."""
    numeric = validate(cfg)
    kind = cfg["kind"]
    spec = build_kernel(cfg["kernel"], cfg.get("_base", "."))
    plan: dict = {"kind": kind, "kernel": spec.label, "n": spec.n, "beta": spec.beta, "theta": spec.theta}
    n_paths = int(numeric.get("n_paths", 2000))
    eps = numeric.get("epsilon", [1e-3])
    eps = min(float(e) for e in (eps if isinstance(eps, list) else [eps]))
    T = float(numeric.get("T", 1.0))
    fast_step = float(numeric.get("fast_step", 0.05))
    if kind == "simulate":
        count = int(round(float(numeric.get("T", 10.0)) / float(numeric.get("step", 0.05)))) + 1
        mem = n_paths * count * spec.n * 8 * 2
        work = n_paths * count
    else:
        count = int(round(T / (eps * fast_step))) + 1
        out = int(round(T / float(numeric.get("out_step", 0.25)))) + 1
        chunk = min(n_paths, 64)
        mem = chunk * count * spec.n * 8 * 4 + n_paths * out * 8 * 8
        work = n_paths * count
    plan["grid"] = {"fast_count": count, "epsilon": eps, "T": T, "fast_step": fast_step}
    plan["memory_bytes"] = float(mem)
    plan["memory_feasible"] = bool(mem <= MEMORY_LIMIT)
    plan["time_estimate_s"] = float(work * 2e-7)
    ranks = []
    if kind != "simulate":
        cov = build_covariance(spec, numeric)
        if kind in ("homogenize", "npoint"):
            field = build_field(cfg["field"], cov.sigma0, cov.n)
            exps = [field.expansion(G) for G in field.observables]
        else:
            exps = lm.expansions_for(build_observables(cfg, cov.n), cov.sigma0, int(numeric.get("degree_cap", 8)))
        ranks = [rank(e) for e in exps]
        p = float(numeric.get("p", 2.0))
        th = cov.theta_hat or 1.0
        n = cov.n
        plan["decay_parameters"] = {"clt": th * (2 * n - 1) + 1, "rough": th * (4 * n - 1) * (p - 1) + 1}
        plan["holder_exponent"] = 0.5 - 1.0 / p if p > 2 else None
        plan["decay_converging"] = [bool(chaos_decay_sum(e, plan["decay_parameters"]["clt"]).converging)
                                    for e in exps]
    if ranks:
        flags = lm.regime_flags(ranks, spec.beta, spec.variant == "exp_ou")
        plan["ranks"] = [r if math.isfinite(r) else "inf" for r in ranks]
        plan["regime"] = flags
    return plan


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #

def run(cfg: dict, out: Path, threads: int = 1) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    r = Run(cfg, out, threads)
    r.execute()
    manifest = {"config_sha256": config_hash(cfg), "version": __version__, "kind": cfg["kind"],
                "wall_clock_s": time.perf_counter() - start, "seeds": r.seeds, "checks": r.checks,
                "threads": threads}
    write_report(out / "manifest.json", manifest)
    return 0 if all(r.checks.values()) else 2


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="volterralab", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="experiment configuration (JSON)")
    ap.add_argument("--out", help="output directory (overrides the config's 'output')")
    ap.add_argument("--threads", type=int, default=1, help="maximum parallelism; never changes results")
    ap.add_argument("--check", action="store_true", help="validate and describe the plan without sampling")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        validate(cfg)
        if args.check:
            plan = describe(cfg)
            print(json.dumps(plan, indent=2, sort_keys=True, default=_json_default))
            return 0 if plan["memory_feasible"] else 2
        out = args.out or cfg.get("output")
        if out is None:
            raise ConfigError("output", "no output directory (use --out or set 'output')")
        if not args.out and not Path(out).is_absolute():
            out = Path(cfg["_base"]) / out
        return run(cfg, Path(out), args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (VolterraLabError, FileNotFoundError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
