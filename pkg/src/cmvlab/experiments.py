"""Experiment configs, runners and result records.

A config is a JSON-compatible dict.  :func:`run_experiment` validates it,
runs the experiment, and returns a :class:`ResultRecord` whose ``checks``
carry their own thresholds.  Files are written by :func:`write_outputs`.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .coupling import (
    analytic_ou_entropy,
    couple_case1,
    couple_case2,
    couple_hamiltonian,
    couple_particle_system,
    coupling_rate,
    gramian,
    steering_gap,
)
from .metrics import (
    TestFunction,
    fit_power_law,
    harnack_gap,
    jackknife_stderr,
    loglog_slope,
    rate_Rdq,
    RateSpec,
    w2_exact,
    w2_modified,
)
from .model import (
    PRESET_DEFAULTS,
    HamiltonianModel,
    SampleSpec,
    ScenarioError,
    applicable_conditions,
    build_scenario,
    check_condition,
)
from .paths import StreamKind, TimeGrid, sample_common, stream
from .simulate import (
    InitialLaw,
    cloud_noise,
    evolve_clouds,
    evolve_interacting,
    initial_uniforms,
    particle_uniforms,
)

EXPERIMENTS = ("validate", "couple", "harnack", "chaos", "hamiltonian")
# keys that never influence results and are left out of the config hash
NON_RESULT_KEYS = ("output", "workers")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit status 3)."""


def _deep_update(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


_POINT0 = {"kind": "point", "loc": [0.0]}
_POINT_HALF = {"kind": "point", "loc": [0.5]}

CASE1_SCENARIO = {"preset": "ou", "variant": "CASE1", "params": {"a": 1.0, "s": 1.0, "s_tilde": 0.5}}

DEFAULTS: dict[str, dict] = {
    "validate": {
        "scenarios": [
            {"preset": "ou"},
            {"preset": "ou", "variant": "CASE2"},
            {"preset": "cos-perturbed", "params": {"s_tilde_x": 0.3}},
            {"preset": "cos-perturbed", "variant": "CASE2"},
            {"preset": "kinetic", "params": {"A": [[0.0, 1.0], [0.0, 0.0]], "M": [[0.0], [1.0]], "s_tilde1": 0.3}},
        ],
        "mc": {"samples": 10000, "seed": 0},
    },
    "couple": {
        "scenario": {"preset": "ou", "variant": "CASE2", "params": {"a": 0.5, "s": 1.0, "s_tilde0": 0.5, "s_tilde1": 0.3}},
        "grid": {"steps": 100, "levels": 12},
        "mc": {"replicas": 10_000, "M": 256, "seed": 0},
        "coupling": {
            "case": 2,
            "t0_list": [0.05, 0.1, 0.25, 0.5, 1.0],
            "delta_frac": 2.0**-7,
            "gamma_max": 1e3,
            "measure": "Q",
        },
        "initial": {"mu0": _POINT0, "nu0": _POINT_HALF},
        "thresholds": {"slope_window": [0.05, 0.25], "slope_range": [-1.3, -0.7], "analytic_slope_tol": 0.1},
    },
    "harnack": {
        "scenario": {"preset": "ou", "params": {"a": 1.0, "s": 1.0, "s_tilde": 0.5}},
        "grid": {"steps": 100, "horizon": 1.0},
        "mc": {"replicas": 1000, "M": 512, "seed": 0},
        "t_list": [0.1, 0.25, 0.5, 1.0],
        "pairs": [
            [_POINT0, _POINT_HALF],
            [_POINT0, {"kind": "point", "loc": [0.25]}],
            [_POINT0, {"kind": "point", "loc": [1.0]}],
        ],
        "test_functions": [
            {"kind": "bump", "eps": 0.1, "center": [0.0], "width": 0.5},
            {"kind": "bump", "eps": 0.05, "center": [1.0], "width": 0.3},
            {"kind": "bump", "eps": 0.5, "center": [-0.5], "width": 1.0},
            {"kind": "bump", "eps": 0.01, "center": [0.5], "width": 0.2},
            {"kind": "constant", "value": 2.0},
        ],
        "thresholds": {"n_stderr": 3.0},
    },
    "chaos": {
        "scenario": {"preset": "ou", "params": {"a": 1.0, "s": 1.0, "s_tilde": 0.5}},
        "grid": {"steps": 50, "horizon": 1.0, "record_every": 5},
        "mc": {"replicas": 64, "M": 4096, "N_list": [8, 16, 32, 64, 128, 256, 512], "seed": 0},
        "initial": {"law": {"kind": "gaussian", "loc": [0.0], "var": 1.0}},
        "entropy": {"enabled": True, "M": 1024, "k_list": [1, 2, 4], "measure": "Q"},
        "thresholds": {
            "w2_exponent_range": [-1.3, -0.45],
            "entropy_exponent_max": -0.35,
            "k_share_factor": 1.5,
        },
    },
    "hamiltonian": {
        "scenario": {"preset": "kinetic"},
        "grid": {"steps": 200},
        "mc": {"replicas": 1000, "M": 128, "seed": 0},
        "coupling": {"t0_list": [0.1, 0.2, 0.4, 0.8], "gamma_max": 1e3, "measure": "Q"},
        "initial": {"mu0": {"kind": "point", "loc": [0.0, 0.0]}, "nu0": {"kind": "point", "loc": [0.2, 0.2]}},
        "thresholds": {"slope_margin": 0.6, "steering_tol": 1e-6, "gramian_tol": 1e-10},
    },
}

BOUNDS = {
    "validate": "regularity conditions hold with the declared constants on all samples",
    "couple": "E[R log R] >= Ent(nu_t | mu_t); cost of order kappa / (1 - exp(-kappa t)) times W2^2",
    "harnack": "P_t log f(nu0) - log P_t f(mu0) <= c (kappa / (1 - exp(-kappa t)) + t) W2(mu0, nu0)^2",
    "chaos": "sup_t E W2(empirical_N, conditional law)^2 and per-particle entropy of order R_{d,q}(N)",
    "hamiltonian": "entropy cost between t^-(4l-3) W2_t^2 and t^-(4l-1) W2^2",
}


def default_config(experiment: str) -> dict:
    if experiment not in DEFAULTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    return {"experiment": experiment, **copy.deepcopy(DEFAULTS[experiment])}


def resolve_config(experiment: str, *layers: dict) -> dict:
    """Defaults, then each layer in order (later layers win)."""
    base = default_config(experiment)
    cfg = base
    for layer in layers:
        if layer:
            cfg = _deep_update(cfg, layer)
    # case 1 swaps in its own default scenario unless a layer picks one
    picks_scenario = any(
        layer and {"preset", "variant"} & set(layer.get("scenario", {})) for layer in layers
    )
    if experiment == "couple" and cfg["coupling"].get("case") == 1 and not picks_scenario:
        cfg = dict(base, scenario=copy.deepcopy(CASE1_SCENARIO))
        for layer in layers:
            if layer:
                cfg = _deep_update(cfg, layer)
    cfg["experiment"] = experiment
    validate_config(cfg)
    return cfg


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate_config(cfg: dict) -> None:
    exp = cfg.get("experiment")
    _need(exp in EXPERIMENTS, f"unknown experiment {exp!r}")
    mc = cfg.get("mc", {})
    if "replicas" in mc:
        _need(isinstance(mc["replicas"], int) and mc["replicas"] >= 1, "mc.replicas must be an integer >= 1")
    if "M" in mc:
        _need(isinstance(mc["M"], int) and mc["M"] >= 2, "mc.M must be an integer >= 2")
    _need(isinstance(mc.get("seed", 0), int) and mc.get("seed", 0) >= 0, "mc.seed must be a nonnegative integer")
    grid = cfg.get("grid", {})
    if "steps" in grid:
        _need(isinstance(grid["steps"], int) and grid["steps"] >= 2, "grid.steps must be an integer >= 2")
    horizon = grid.get("horizon")
    if horizon is not None:
        _need(horizon > 0, "grid.horizon must be positive")
    workers = cfg.get("workers", 1)
    _need(isinstance(workers, int) and workers >= 1, "workers must be a positive integer")
    try:
        scenarios = cfg.get("scenarios") if exp == "validate" else [cfg.get("scenario")]
        _need(bool(scenarios) and all(isinstance(s, dict) for s in scenarios), "scenario config missing")
        models = [build_scenario(s) for s in scenarios]
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from exc
    if exp in ("couple", "hamiltonian"):
        t0s = cfg["coupling"].get("t0_list") or []
        _need(len(t0s) > 0 and all(t > 0 for t in t0s), "coupling.t0_list must hold positive times")
        if horizon is not None:
            _need(all(t <= horizon for t in t0s), "all t0 must be <= grid.horizon")
        _need(str(cfg["coupling"].get("measure", "Q")).upper() in ("P", "Q"), "coupling.measure must be P or Q")
        df = cfg["coupling"].get("delta_frac", 2.0**-7)
        _need(0 < df < 1, "coupling.delta_frac must lie in (0, 1)")
    if exp == "couple":
        case = cfg["coupling"].get("case")
        _need(case in (1, 2), "coupling.case must be 1 or 2")
        want = "CASE1" if case == 1 else "CASE2"
        _need(models[0].variant.value == want, f"case {case} needs a {want} scenario")
    if exp == "hamiltonian":
        _need(isinstance(models[0], HamiltonianModel), "hamiltonian experiment needs the kinetic preset")
    if exp == "chaos":
        nl = mc.get("N_list") or []
        _need(len(nl) > 0, "mc.N_list must be nonempty")
        _need(all(isinstance(n, int) and n >= 1 for n in nl), "mc.N_list entries must be positive integers")
        _need(all(mc["M"] % n == 0 for n in nl), "mc.M must be a multiple of every N")
    if exp == "harnack":
        _need(len(cfg.get("pairs", [])) >= 1, "harnack needs at least one initial pair")
        _need(all(0 < t <= cfg["grid"]["horizon"] for t in cfg.get("t_list", [])), "t_list must lie in (0, horizon]")
        try:
            [TestFunction.from_dict(f) for f in cfg.get("test_functions", [])]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad test function: {exc}") from exc
    for key in ("initial",):
        if key in cfg:
            try:
                for v in cfg[key].values():
                    InitialLaw.from_dict(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad initial law: {exc}") from exc


def config_hash(cfg: dict) -> str:
    core = {k: v for k, v in cfg.items() if k not in NON_RESULT_KEYS}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Check:
    name: str
    value: Any
    threshold: Any
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "value": _clean(self.value), "threshold": _clean(self.threshold), "pass": bool(self.passed)}


@dataclass
class PlotTable:
    """One figure's data: rows of (series, x, y, yerr) plus any extra columns."""

    name: str
    columns: list[str]
    rows: list[list]


@dataclass
class ResultRecord:
    experiment: str
    config: dict
    points: list[dict] = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    replicas: list[dict] = field(default_factory=list)
    plots: list[PlotTable] = field(default_factory=list)
    tainted: bool = False

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        if self.tainted:
            return 2
        return 0 if self.passed else 1

    def summary(self) -> dict:
        return {
            "experiment": self.experiment,
            "version": __version__,
            "config": {k: v for k, v in self.config.items() if k not in NON_RESULT_KEYS},
            "config_hash": config_hash(self.config),
            "bound": BOUNDS[self.experiment],
            "points": _clean(self.points),
            "fits": _clean(self.fits),
            "checks": [c.to_dict() for c in self.checks],
            "passed": self.passed,
            "tainted": self.tainted,
            "diagnostics": _clean(self.diagnostics),
        }


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


# --- experiments -----------------------------------------------------------------


def run_validate(cfg: dict) -> ResultRecord:
    rec = ResultRecord("validate", cfg)
    spec_kw = {"count": cfg["mc"]["samples"], "seed": cfg["mc"]["seed"]}
    for sc in cfg["scenarios"]:
        model = build_scenario(sc)
        for cond in applicable_conditions(model):
            rep = check_condition(model, cond, SampleSpec(**spec_kw))
            rec.points.append(
                {"preset": model.preset_id, "variant": model.variant.value, "K": model.K,
                 "K_tilde": model.K_tilde, "lambda": model.lam, **rep.to_dict()}
            )
            rec.checks.append(
                Check(f"{model.preset_id}/{model.variant.value}/{cond}", rep.worst_ratio, "<= 1 + 1e-9", not rep.violated)
            )
    return rec


def _initial(d: dict) -> InitialLaw:
    return InitialLaw.from_dict(d)


def _initial_w2(mu0: InitialLaw, nu0: InitialLaw, n: int = 4096, t: float | None = None, m: int = 0) -> float:
    """W2 between two initial laws from quantile-coupled samples (exact for point masses)."""
    u = (np.arange(n)[:, None] + 0.5) / n * np.ones((1, mu0.dim))
    x, y = mu0.quantile(u), nu0.quantile(u)
    if mu0.kind == nu0.kind == "point":
        x, y = x[:1], y[:1]
    return w2_modified(x, y, t, m) if t is not None else w2_exact(x, y)[0]


def run_couple(cfg: dict, workers: int = 1) -> ResultRecord:
    rec = ResultRecord("couple", cfg)
    model = build_scenario(cfg["scenario"])
    c, mc, th = cfg["coupling"], cfg["mc"], cfg["thresholds"]
    mu0, nu0 = _initial(cfg["initial"]["mu0"]), _initial(cfg["initial"]["nu0"])
    engine = couple_case1 if c["case"] == 1 else couple_case2
    w2 = _initial_w2(mu0, nu0)
    kappa = coupling_rate(model)
    analytic_ok = model.preset_id == "ou" and mu0.kind == nu0.kind == "point" and model.dim_x == 1
    ests, ses, refs, t0s = [], [], [], []
    tainted = False
    for t0 in c["t0_list"]:
        res = engine(
            model, mu0, nu0, t0, n_steps=cfg["grid"]["steps"], levels=cfg["grid"].get("levels", 12),
            delta_frac=c["delta_frac"], M=mc["M"], replicas=mc["replicas"], seed=mc["seed"],
            measure=c["measure"], gamma_max=c["gamma_max"], workers=workers,
        )
        s = res.summary()
        tainted |= res.tainted
        point = {"t0": t0, **s}
        if analytic_ok:
            point["analytic_entropy"] = analytic_ou_entropy(w2, t0, model.params["a"], model.params["s"])
        rec.points.append(point)
        for i in range(res.terminal_gap.size):
            rec.replicas.append(
                {"t0": t0, "replica": i, "t": res.cutoff, "gap": res.terminal_gap[i], "log_r": res.log_r[i],
                 "half_quad": res.half_quad[i], "clamped": int(res.clamped[i])}
            )
        t0s.append(t0)
        ests.append(s["entropy_cost"])
        ses.append(s["entropy_cost_stderr"])
        refs.append(point.get("analytic_entropy"))
        if c["measure"].upper() == "P":
            dev = abs(s["density_mean"] - 1.0)
            rec.checks.append(Check(f"martingale t0={t0}", dev, f"< 3 stderr = {3 * s['density_stderr']:.6g}",
                                    dev < 3 * s["density_stderr"]))
        if w2 == 0:
            rec.checks.append(Check(f"zero cost t0={t0}", s["entropy_cost"], 0.0, s["entropy_cost"] == 0.0))
        elif analytic_ok:
            lo = point["analytic_entropy"] - 3 * s["entropy_cost_stderr"]
            rec.checks.append(Check(f"dominance t0={t0}", s["entropy_cost"], f">= {lo:.6g}", s["entropy_cost"] >= lo))
    lo_w, hi_w = th.get("slope_window", [0.0, math.inf])
    window = [i for i, t in enumerate(t0s) if lo_w <= t <= hi_w]
    if w2 > 0 and len(window) >= 2 and all(ests[i] > 0 for i in window):
        slope = loglog_slope([t0s[i] for i in window], [ests[i] for i in window])
        rec.fits["estimate_slope"] = slope
        lo_s, hi_s = th["slope_range"]
        rec.checks.append(Check("estimate slope", slope, [lo_s, hi_s], lo_s <= slope <= hi_s))
        if analytic_ok:
            aslope = loglog_slope([t0s[i] for i in window], [refs[i] for i in window])
            rec.fits["analytic_slope"] = aslope
            tol = th.get("analytic_slope_tol", 0.1)
            rec.checks.append(Check("analytic slope", aslope, [-1 - tol, -1 + tol], abs(aslope + 1) <= tol))
    shape = [kappa / -math.expm1(-kappa * t) * w2**2 if kappa > 0 else w2**2 / t for t in t0s]
    scale = max((e / sh for e, sh in zip(ests, shape) if sh > 0), default=0.0)
    rec.fits["shape_scale"] = scale
    rows = [["data", t, e, s] for t, e, s in zip(t0s, ests, ses)]
    rows += [["reference", t, scale * sh, 0.0] for t, sh in zip(t0s, shape)]
    if analytic_ok:
        rows += [["analytic", t, r, 0.0] for t, r in zip(t0s, refs)]
    rec.plots.append(PlotTable("entropy", ["series", "t0", "entropy_cost", "stderr"], rows))
    rec.tainted = tainted
    rec.diagnostics = {"kappa": kappa, "W2_initial": w2}
    return rec


def run_harnack(cfg: dict, workers: int = 1) -> ResultRecord:
    rec = ResultRecord("harnack", cfg)
    model = build_scenario(cfg["scenario"])
    mc, g = cfg["mc"], cfg["grid"]
    grid = TimeGrid.uniform(g["horizon"], g["steps"])
    t_idx = [grid.index_of(t, atol=1e-9) for t in cfg["t_list"]]
    fs = [TestFunction.from_dict(f) for f in cfg["test_functions"]]
    kappa = coupling_rate(model)
    R, M, seed, k = mc["replicas"], mc["M"], mc["seed"], model.dim_x
    common = np.stack([sample_common(grid, model.dim_b, seed, r) for r in range(R)])
    noise = np.stack([cloud_noise(seed, r, grid, M, model.dim_w) for r in range(R)])
    u = np.stack([initial_uniforms(seed, r, 0, M, k) for r in range(R)])
    table = []
    for p, (a, b) in enumerate(cfg["pairs"]):
        mu0, nu0 = _initial(a), _initial(b)
        w2 = _initial_w2(mu0, nu0)
        init = np.stack([mu0.quantile(u), nu0.quantile(u)], axis=1)
        batch = evolve_clouds(model, grid, init, common, noise, record=t_idx)
        for j, t in enumerate(cfg["t_list"]):
            rate = kappa / -math.expm1(-kappa * t) if kappa > 0 else 1 / t
            for fi, f in enumerate(fs):
                est = harnack_gap(f, batch.states[:, 0, j], batch.states[:, 1, j])
                table.append({"pair": p, "f": fi, "t0": t, "gap": est.value, "stderr": est.stderr, "W2": w2,
                              "bound_shape": rate * w2**2, "c_shape": (rate + t) * w2**2})
    # c_tilde is the smallest constant making pair 0 dominated at every (f, t)
    fit_rows = [r for r in table if r["pair"] == 0 and r["c_shape"] > 0]
    c_fit = max([r["gap"] / r["c_shape"] for r in fit_rows] + [0.0])
    rec.fits["c_tilde"] = c_fit
    n_se = cfg["thresholds"]["n_stderr"]
    for r in table:
        r["bound"] = c_fit * r["c_shape"]
        if r["pair"] == 0:
            continue
        ok = r["gap"] <= r["bound"] + n_se * r["stderr"]
        rec.checks.append(Check(f"pair {r['pair']} f{r['f']} t={r['t0']}", r["gap"],
                                f"<= {r['bound']:.6g} + {n_se} stderr", ok))
    rec.points = table
    rows = [[r["t0"], r["gap"], r["bound_shape"], r["stderr"], r["pair"], r["f"]] for r in table]
    rec.plots.append(PlotTable("harnack", ["t0", "gap", "bound_shape", "stderr", "pair", "f"], rows))
    rec.diagnostics = {"kappa": kappa}
    return rec


def chaos_w2(model, cfg: dict, workers: int = 1) -> tuple[list[dict], dict]:
    """sup_t E W2(empirical N-system, reference cloud)^2 for each N."""
    mc, g = cfg["mc"], cfg["grid"]
    grid = TimeGrid.uniform(g["horizon"], g["steps"])
    record = np.arange(0, grid.n_steps + 1, g.get("record_every", 1))
    if record[-1] != grid.n_steps:
        record = np.append(record, grid.n_steps)
    law = _initial(cfg["initial"]["law"])
    R, M, seed, k = mc["replicas"], mc["M"], mc["seed"], model.dim_x
    if k != 1:
        raise ConfigError("the chaos experiment compares 1D clouds")
    w2 = {N: np.zeros((R, record.size)) for N in mc["N_list"]}
    for r in range(R):
        common = sample_common(grid, model.dim_b, seed, r)[None]
        ref = evolve_clouds(
            model, grid, law.quantile(initial_uniforms(seed, r, 0, M, k))[None, None], common,
            cloud_noise(seed, r, grid, M, model.dim_w)[None], record=record,
        )
        ref_sorted = np.sort(ref.states[0, 0, :, :, 0], axis=-1)
        for N in mc["N_list"]:
            init = law.quantile(particle_uniforms(seed, r, N, k))
            priv = np.stack([
                stream(seed, r, StreamKind.PRIVATE, 1 + i).standard_normal((grid.n_steps, model.dim_w))
                for i in range(N)
            ]) * np.sqrt(grid.steps)[None, :, None]
            states, _ = evolve_interacting(model, grid, init[None], common, priv[None], record)
            emp = np.repeat(np.sort(states[0, :, :, 0], axis=-1), M // N, axis=-1)
            w2[N][r] = ((emp - ref_sorted) ** 2).mean(axis=-1)
    points = []
    for N in mc["N_list"]:
        mean_t = w2[N].mean(axis=0)
        j = int(np.argmax(mean_t))
        points.append({"N": N, "EW2sq": float(mean_t[j]), "stderr": jackknife_stderr(w2[N][:, j]),
                       "argmax_t": float(grid.knots[record[j]])})
    return points, {"record_knots": record.size}


def run_chaos(cfg: dict, workers: int = 1) -> ResultRecord:
    rec = ResultRecord("chaos", cfg)
    model = build_scenario(cfg["scenario"])
    th = cfg["thresholds"]
    points, diag = chaos_w2(model, cfg, workers)
    Ns = [p["N"] for p in points]
    vals = [p["EW2sq"] for p in points]
    rows = [["data", N, v, p["stderr"]] for N, v, p in zip(Ns, vals, points)]
    if len(Ns) >= 4:
        fit = fit_power_law(Ns, vals)
        rec.fits["w2_exponent"] = fit.exponent
        rec.fits["w2_r2"] = fit.r2
        lo, hi = th["w2_exponent_range"]
        rec.checks.append(Check("w2 exponent", fit.exponent, [lo, hi], lo <= fit.exponent <= hi))
        rows += [["reference", N, float(fit(N)), 0.0] for N in Ns]
    rec.fits["rate_Rdq"] = [float(rate_Rdq(N, RateSpec(d=model.dim_x, q=8.0))) for N in Ns]
    rec.plots.append(PlotTable("chaos_w2", ["series", "N", "EW2sq", "stderr"], rows))
    rec.points = [{"kind": "w2", **p} for p in points]
    ent = cfg.get("entropy", {})
    if ent.get("enabled", False):
        law = _initial(cfg["initial"]["law"])
        costs, erows = [], []
        for N in Ns:
            e = couple_particle_system(
                model, N, law, law, cfg["grid"]["horizon"], n_steps=cfg["grid"]["steps"], M=ent["M"],
                replicas=cfg["mc"]["replicas"], seed=cfg["mc"]["seed"], measure=ent["measure"], workers=workers,
            )
            shares = {kk: e.k_share(kk) for kk in ent["k_list"] if N % kk == 0}
            p = {"kind": "entropy", **e.summary(), "k_share": shares}
            rec.points.append(p)
            costs.append(e.per_particle_cost)
            erows.append(["data", N, e.per_particle_cost, e.per_particle_stderr])
            base = shares.get(1, 0.0)
            fac = th["k_share_factor"]
            for kk, val in shares.items():
                ratio = val / (kk * base) if base > 0 else (1.0 if val == 0 else math.inf)
                rec.checks.append(Check(f"k-share N={N} k={kk}", ratio, [1 / fac, fac], 1 / fac <= ratio <= fac))
        if len(Ns) >= 4 and all(c > 0 for c in costs):
            fit = fit_power_law(Ns, costs)
            rec.fits["entropy_exponent"] = fit.exponent
            rec.checks.append(Check("entropy exponent", fit.exponent, f"<= {th['entropy_exponent_max']}",
                                    fit.exponent <= th["entropy_exponent_max"]))
            erows += [["reference", N, float(fit(N)), 0.0] for N in Ns]
        rec.plots.append(PlotTable("chaos_entropy", ["series", "N", "per_particle_cost", "stderr"], erows))
    rec.diagnostics = diag
    return rec


def run_hamiltonian(cfg: dict, workers: int = 1) -> ResultRecord:
    rec = ResultRecord("hamiltonian", cfg)
    model = build_scenario(cfg["scenario"])
    c, mc, th = cfg["coupling"], cfg["mc"], cfg["thresholds"]
    mu0, nu0 = _initial(cfg["initial"]["mu0"]), _initial(cfg["initial"]["nu0"])
    l = model.l
    # Gramian oracle for the scalar integrator
    ref = build_scenario({"preset": "kinetic", "params": {"A": [[0.0]], "M": [[1.0]]}})
    q = float(gramian(ref.A, ref.M, TimeGrid.uniform(1.0, 200))[0, 0])
    rec.checks.append(Check("gramian A=0 M=1 t0=1", q, f"1/6 +- {th['gramian_tol']}", abs(q - 1 / 6) <= th["gramian_tol"]))
    free = build_scenario({"preset": "kinetic", "params": {
        "A": model.A.tolist(), "M": model.M.tolist(), "friction": 0.0, "kappa": 0.0, "s_tilde1": 0.0}})
    v = np.asarray(nu0.mean(), dtype=float) - np.asarray(mu0.mean(), dtype=float)
    if not np.any(v):
        v = np.ones(model.dim_x)
    steer = steering_gap(free, v, max(c["t0_list"]))
    rec.checks.append(Check("exact steering", steer, f"< {th['steering_tol']}", steer < th["steering_tol"]))
    ests, ses, t0s = [], [], []
    for t0 in c["t0_list"]:
        res = couple_hamiltonian(
            model, mu0, nu0, t0, n_steps=cfg["grid"]["steps"], M=mc["M"], replicas=mc["replicas"],
            seed=mc["seed"], measure=c["measure"], gamma_max=c["gamma_max"], workers=workers,
        )
        s = res.summary()
        rec.tainted |= res.tainted
        s["W2_t0"] = _initial_w2(mu0, nu0, t=t0, m=model.m)
        rec.points.append({"t0": t0, **s})
        for i in range(res.terminal_gap.size):
            rec.replicas.append(
                {"t0": t0, "replica": i, "t": t0, "gap": res.terminal_gap[i], "log_r": res.log_r[i],
                 "half_quad": res.half_quad[i], "clamped": int(res.clamped[i])}
            )
        t0s.append(t0)
        ests.append(s["entropy_cost"])
        ses.append(s["entropy_cost_stderr"])
    rows = [["data", t, e, s] for t, e, s in zip(t0s, ests, ses)]
    if len(t0s) >= 2 and all(e > 0 for e in ests):
        slope = loglog_slope(t0s, ests)
        rec.fits["estimate_slope"] = slope
        lo = -4 * l + 1 - th["slope_margin"]
        hi = -4 * l + 3 + th["slope_margin"]
        rec.checks.append(Check("cost slope", slope, [lo, hi], lo <= slope <= hi))
        scale = max(e * t ** (4 * l - 3) for t, e in zip(t0s, ests))
        rows += [["reference", t, scale * t ** -(4 * l - 3), 0.0] for t in t0s]
    rec.plots.append(PlotTable("hamiltonian", ["series", "t0", "entropy_cost", "stderr"], rows))
    rec.diagnostics = {"kalman_l": l, "gramian_unit": q}
    return rec


RUNNERS = {
    "validate": lambda cfg, workers: run_validate(cfg),
    "couple": run_couple,
    "harnack": run_harnack,
    "chaos": run_chaos,
    "hamiltonian": run_hamiltonian,
}


def run_experiment(cfg: dict) -> ResultRecord:
    validate_config(cfg)
    return RUNNERS[cfg["experiment"]](cfg, int(cfg.get("workers", 1)))


# --- output ----------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def _csv_text(columns: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def summary_json(record: ResultRecord) -> str:
    return json.dumps(record.summary(), sort_keys=True, indent=2) + "\n"


def emit_plotdata(record: ResultRecord) -> dict[str, str]:
    """CSV text per figure, keyed by file name."""
    return {f"plot_{p.name}.csv": _csv_text(p.columns, p.rows) for p in record.plots}


def write_outputs(record: ResultRecord, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    written = []
    files = {"summary.json": summary_json(record)}
    cols = ["t0", "replica", "t", "gap", "log_r", "half_quad", "clamped"]
    files["replicas.csv"] = _csv_text(cols, [[r[c] for c in cols] for r in record.replicas])
    files.update(emit_plotdata(record))
    for name, text in files.items():
        _atomic_write(out / name, text)
        written.append(out / name)
    return written


def known_presets() -> list[str]:
    return sorted(PRESET_DEFAULTS)
