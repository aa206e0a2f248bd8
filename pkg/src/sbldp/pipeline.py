"""
Run orchestration behind the command line.

Each ``run_*`` function takes a validated :class:`ExperimentConfig`, writes its
files into ``out_dir`` and returns the summary dictionary. Every run also
writes ``manifest.json`` with the config digest, package version, seed and the
SHA-256 of each output file; the thread count is deliberately left out so that
bundles compare byte for byte across thread counts.
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy import stats

from . import __version__
from .action import (
    bridge_rate,
    dynamic_rate,
    minimize_action,
    rate_parameterizations,
)
from .config import ExperimentConfig
from .eot import (
    build_cost,
    entropic_objective,
    exact_ot,
    sample_static_coupling,
    sinkhorn,
)
from .errors import ConfigError, SBError
from .io import ensure_dir, file_digest, read_path_csv, write_csv, write_json
from .laplace import laplace_sweep, tube_probability_check, uniform_scan
from .model import BridgeSpec, bridge_drift, sampled_lipschitz
from .simulate import (
    PathSample,
    exit_probability_sweep,
    simulate_bridge,
    simulate_bridges_between,
    simulate_forward,
    simulate_reversed_bridge,
)


def _stage(name):
    """Re-raise package errors with the pipeline stage in the message."""
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, kind, exc, tb):
            if exc is not None and isinstance(exc, SBError) and not isinstance(exc, ConfigError):
                exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
            return False
    return _Guard()


def write_manifest(out_dir: str, cfg: ExperimentConfig, command: str, files) -> str:
    entries = {os.path.basename(f): file_digest(f) for f in sorted(files)}
    return write_json(os.path.join(out_dir, "manifest.json"), {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "version": __version__,
        "seed": cfg.seed,
        "files": entries,
    })


def _path_rows(batch, limit):
    rows = []
    states = batch.states
    for i in range(min(limit, len(states))):
        for k, t in enumerate(batch.times):
            rows.append([i, k, t, *states[i, k]])
    return rows


def _path_columns(dim):
    return ["path_id", "step", "t"] + [f"x{j + 1}" for j in range(dim)]


def _moments(batch, probes=(0.25, 0.5, 0.75)):
    out = []
    for t in probes:
        m = batch.marginal(t)
        out.append({"t": t, "mean": m.mean(axis=0), "var": m.var(axis=0, ddof=1)})
    return out


def run_simulate(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Simulate forward, bridge or reversed-bridge paths from ``bridge``."""
    ensure_dir(out_dir)
    sim = cfg.sim_config()
    spec = cfg.bridge()
    mode = cfg.section("bridge").get("mode", "bridge")
    with _stage("simulate"):
        if mode == "forward":
            batch = simulate_forward(spec.model, spec.x, sim, threads=threads)
        elif mode == "reversed":
            batch = simulate_reversed_bridge(spec, sim, threads=threads)
        else:
            batch = simulate_bridge(spec, sim, threads=threads)
    paths = write_csv(os.path.join(out_dir, "paths.csv"), _path_columns(cfg.dim),
                      _path_rows(batch, cfg.data["output"]["write_paths"]))
    summary = {"mode": mode, "metadata": batch.metadata(), "moments": _moments(batch)}
    sfile = write_json(os.path.join(out_dir, "summary.json"), summary)
    write_manifest(out_dir, cfg, "simulate", [paths, sfile])
    return summary


def _plan_rows(mu, nu, plan):
    rows = []
    for i in range(len(mu)):
        for j in range(len(nu)):
            rows.append({"i": i, "j": j, "x": mu.atoms[i], "y": nu.atoms[j],
                         "weight": plan[i, j]})
    return rows


def _dual_rows(mu, nu, psi, phi):
    rows = [{"side": "mu", "index": i, "atom": mu.atoms[i], "potential": psi[i]}
            for i in range(len(mu))]
    rows += [{"side": "nu", "index": j, "atom": nu.atoms[j], "potential": phi[j]}
             for j in range(len(nu))]
    return rows


_PLAN_COLS = ["i", "j", "x", "y", "weight"]
_DUAL_COLS = ["side", "index", "atom", "potential"]


def _solve_static(cfg, model, mu, nu):
    cost = build_cost(model, mu, nu, "limit")
    ot = exact_ot(cost, mu, nu)
    solver = cfg.data["solver"]
    if solver["method"] == "sinkhorn":
        sk = sinkhorn(cost, mu, nu, model.eta, tol=solver["tol"], max_iter=solver["max_iter"])
        return cost, ot, sk.plan, sk.psi, sk.phi, {
            "objective": sk.objective, "marginal_error": sk.marginal_error,
            "n_iter": sk.n_iter, "converged": sk.converged, "log_domain": sk.log_domain}
    return cost, ot, ot.plan, ot.psi, ot.phi, {"objective": ot.value}


def run_sinkhorn(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Entropic plan at the model eta, the exact plan, and an eta schedule."""
    ensure_dir(out_dir)
    model = cfg.model()
    mu, nu = cfg.marginals()
    solver = cfg.data["solver"]
    with _stage("sinkhorn"):
        cost = build_cost(model, mu, nu, "limit")
        ot = exact_ot(cost, mu, nu)
        sk = sinkhorn(cost, mu, nu, model.eta, tol=solver["tol"], max_iter=solver["max_iter"])
        schedule = []
        for eta in solver["eta_schedule"]:
            s = sinkhorn(cost, mu, nu, eta, tol=solver["tol"], max_iter=solver["max_iter"])
            bound = eta * math.log(len(mu) * len(nu)) + 1e-6
            gap = s.objective - ot.value
            schedule.append({"eta": eta, "objective": s.objective, "exact": ot.value,
                             "gap": gap, "bound": bound, "within": abs(gap) <= bound,
                             "marginal_error": s.marginal_error})
    files = [
        write_csv(os.path.join(out_dir, "plan.csv"), _PLAN_COLS, _plan_rows(mu, nu, sk.plan)),
        write_csv(os.path.join(out_dir, "duals.csv"), _DUAL_COLS,
                  _dual_rows(mu, nu, sk.psi, sk.phi)),
        write_csv(os.path.join(out_dir, "exact_plan.csv"), _PLAN_COLS,
                  _plan_rows(mu, nu, ot.plan)),
        write_csv(os.path.join(out_dir, "schedule.csv"),
                  ["eta", "objective", "exact", "gap", "bound", "within", "marginal_error"],
                  schedule),
    ]
    summary = {"eta": model.eta, "objective": sk.objective, "marginal_error": sk.marginal_error,
               "converged": sk.converged, "n_iter": sk.n_iter, "exact_value": ot.value,
               "entropic_check": entropic_objective(sk.plan, cost, mu, nu, model.eta),
               "schedule": schedule}
    files.append(write_json(os.path.join(out_dir, "summary.json"), summary))
    write_manifest(out_dir, cfg, "sinkhorn", files)
    return summary


def perturbed_line(times, x, y, amplitude=()):
    """Line from x to y plus ``sum_k a_k sin(k pi t)`` (vector amplitudes broadcast)."""
    t = np.asarray(times, dtype=float)[:, None]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = x + t * (y - x)
    for k, a in enumerate(amplitude, start=1):
        out = out + a * np.sin(k * np.pi * t)
    return out


def run_rate(cfg: ExperimentConfig, out_dir: str, threads: int = 1, path_csv=None,
             out_file=None) -> dict:
    """Rates of a path read from CSV (``t,x1,...``) or of the configured test paths."""
    ensure_dir(out_dir)
    model = cfg.model()
    if path_csv is not None:
        if not os.path.isfile(path_csv):
            raise ConfigError(f"file not found: {path_csv}", "--path")
        times, states = read_path_csv(path_csv)
        paths = [PathSample(times, states)]
    else:
        grid = cfg.sim_config().time_grid()
        paths = [PathSample(grid, perturbed_line(grid, p["x"], p["y"], p.get("amplitude", ())))
                 for p in cfg.section("paths")]
    reports = []
    with _stage("rate"):
        ot = None
        if "marginals" in cfg.data:
            mu, nu = cfg.marginals()
            ot = exact_ot(build_cost(model, mu, nu, "limit"), mu, nu)
        for p in paths:
            spec = BridgeSpec(model, p.states[0], p.states[-1])
            entry = {"x": spec.x, "y": spec.y, "bridge_rate": bridge_rate(spec, p),
                     "parameterizations": rate_parameterizations(spec, p)}
            if ot is not None:
                entry["dynamic"] = dynamic_rate(p, ot, model).to_dict()
            reports.append(entry)
    summary = {"reports": reports}
    target = out_file or os.path.join(out_dir, "rate.json")
    files = [write_json(target, summary)]
    write_manifest(os.path.dirname(os.path.abspath(target)), cfg, "rate", files)
    return summary


def run_minimize(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Minimum-action path for the configured bridge and functional."""
    ensure_dir(out_dir)
    spec = cfg.bridge()
    n = cfg.data["minimize"].get("n_steps", cfg.data["sim"]["n_steps"])
    with _stage("minimize"):
        res = minimize_action(spec, cfg.functional(), n, threads=threads, **cfg.minimizer())
    rows = [[t, *s] for t, s in zip(res.path.times, res.path.states)]
    files = [write_csv(os.path.join(out_dir, "path.csv"),
                       ["t"] + [f"x{j + 1}" for j in range(cfg.dim)], rows)]
    summary = res.to_dict()
    files.append(write_json(os.path.join(out_dir, "summary.json"), summary))
    write_manifest(out_dir, cfg, "minimize", files)
    return summary


def _sweep_cfg(cfg):
    sweep = cfg.data["sweep"]
    extra = {"batch": sweep["batch"]} if "batch" in sweep else {}
    return cfg.sim_config(**extra), sweep


def run_laplace_sweep(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Laplace estimates over ``sweep.etas`` against the variational value."""
    ensure_dir(out_dir)
    sim, sweep = _sweep_cfg(cfg)
    with _stage("laplace-sweep"):
        res = laplace_sweep(cfg.bridge(), cfg.functional(), sweep["etas"], sim,
                            controlled_below=sweep["controlled_below"], threads=threads,
                            minimizer=cfg.minimizer())
    files = [write_csv(os.path.join(out_dir, "sweep.csv"), res.COLUMNS, res.rows)]
    summary = res.summary(sweep["rel_tol"])
    files.append(write_json(os.path.join(out_dir, "summary.json"), summary))
    write_manifest(out_dir, cfg, "laplace-sweep", files)
    return summary


def run_uniform_scan(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Maximum Laplace gap over ``sweep.pairs`` per eta."""
    ensure_dir(out_dir)
    sim, sweep = _sweep_cfg(cfg)
    if not sweep.get("pairs"):
        raise ConfigError("uniform-scan needs at least one pair", "$.sweep.pairs")
    with _stage("uniform-scan"):
        res = uniform_scan(cfg.model(), cfg.functional(), sweep["pairs"], sweep["etas"], sim,
                           controlled_below=sweep["controlled_below"], threads=threads,
                           minimizer=cfg.minimizer())
    files = [write_csv(os.path.join(out_dir, "scan.csv"), res.COLUMNS, res.rows)]
    summary = res.summary()
    summary["pass"] = bool(res.decreasing)
    files.append(write_json(os.path.join(out_dir, "summary.json"), summary))
    write_manifest(out_dir, cfg, "uniform-scan", files)
    return summary


_TUBE_COLS = ["eta", "hits", "frequency", "minus_eta_log_p", "stderr", "inf_rate", "gap",
              "zero_hits"]


def _tube(cfg, sim, threads):
    tube = cfg.section("tube")
    mu, nu = cfg.marginals()
    center = perturbed_line(sim.time_grid(), tube["start"], tube["end"])
    etas = tube.get("etas", cfg.data["sweep"]["etas"])
    return tube_probability_check(cfg.model(), mu, nu, center, tube["radius"], etas, sim,
                                  threads=threads)


def run_ldp_check(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Tube probabilities of the dynamic bridge against the tube infimum of the rate."""
    ensure_dir(out_dir)
    sim, _ = _sweep_cfg(cfg)
    with _stage("ldp-check"):
        out = _tube(cfg, sim, threads)
    files = [write_csv(os.path.join(out_dir, "tube.csv"), _TUBE_COLS, out["rows"])]
    gaps = [r["gap"] for r in out["rows"]]
    lower_ok = all(r["minus_eta_log_p"] >= out["inf_rate"]["rate"] - 4 * r["stderr"]
                   for r in out["rows"] if math.isfinite(r["stderr"]))
    summary = {"inf_rate": out["inf_rate"], "trend_slope": out["trend_slope"],
               "gap_decreasing": bool(gaps[-1] < gaps[0]), "lower_bracket": lower_ok,
               "pass": bool(gaps[-1] < gaps[0] and lower_ok)}
    files.append(write_json(os.path.join(out_dir, "summary.json"), summary))
    write_manifest(out_dir, cfg, "ldp-check", files)
    return summary


def endpoint_chi2(xs, ys, mu, nu, plan) -> dict:
    """Pearson statistic of sampled endpoint cells against the plan."""
    i = np.array([mu.index_of(x) for x in xs])
    j = np.array([nu.index_of(y) for y in ys])
    counts = np.zeros(plan.shape)
    np.add.at(counts, (i, j), 1)
    expected = plan / plan.sum() * len(xs)
    live = expected > 0
    stat = float(np.sum((counts[live] - expected[live]) ** 2 / expected[live]))
    dof = int(live.sum()) - 1
    return {"chi2": stat, "dof": dof,
            "p_value": float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0,
            "off_support": int(counts[~live].sum()),
            "counts": counts, "expected": expected}


def run_dynamic_sb(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Static plan, coupling draws and bridge interpolation, with rate reports.

    Writes ``plan.csv``, ``duals.csv``, ``paths.csv``, ``rate_<k>.json`` for
    each entry of ``paths``, optional ``tube.csv``, ``summary.json`` and the
    manifest.
    """
    ensure_dir(out_dir)
    model = cfg.model()
    mu, nu = cfg.marginals()
    sim = cfg.sim_config()
    with _stage("static"):
        cost, ot, plan, psi, phi, info = _solve_static(cfg, model, mu, nu)
    with _stage("coupling"):
        xs, ys = sample_static_coupling(plan, sim.batch, sim.seed, mu=mu, nu=nu)
    with _stage("bridges"):
        batch = simulate_bridges_between(model, xs, ys, sim, threads=threads, stage="dynamic")
    files = [
        write_csv(os.path.join(out_dir, "plan.csv"), _PLAN_COLS, _plan_rows(mu, nu, plan)),
        write_csv(os.path.join(out_dir, "duals.csv"), _DUAL_COLS, _dual_rows(mu, nu, psi, phi)),
        write_csv(os.path.join(out_dir, "paths.csv"), _path_columns(cfg.dim),
                  _path_rows(batch, cfg.data["output"]["write_paths"])),
    ]
    grid = sim.time_grid()
    with _stage("rates"):
        for k, p in enumerate(cfg.data.get("paths", [])):
            path = PathSample(grid, perturbed_line(grid, p["x"], p["y"], p.get("amplitude", ())))
            report = dynamic_rate(path, ot, model)
            files.append(write_json(os.path.join(out_dir, f"rate_{k:03d}.json"),
                                    report.to_dict()))
    chi = endpoint_chi2(xs, ys, mu, nu, plan)
    summary = {"static": info, "exact_value": ot.value, "batch": sim.batch,
               "endpoint_chi2": {k: chi[k] for k in ("chi2", "dof", "p_value", "off_support")},
               "endpoint_counts": chi["counts"], "endpoint_expected": chi["expected"],
               "exit_count": batch.exit_count}
    if "tube" in cfg.data:
        with _stage("tube"):
            out = _tube(cfg, sim, threads)
        files.append(write_csv(os.path.join(out_dir, "tube.csv"), _TUBE_COLS, out["rows"]))
        summary["tube"] = {"inf_rate": out["inf_rate"], "trend_slope": out["trend_slope"]}
    files.append(write_json(os.path.join(out_dir, "summary.json"), summary))
    write_manifest(out_dir, cfg, "run-dynamic-sb", files)
    return summary


# Assumption proxies.

def _sample_points(rng, n, dim, radius, delta):
    t = rng.uniform(0.0, 1.0 - delta, size=n)
    x = rng.uniform(-radius, radius, size=(n, dim))
    y = rng.uniform(-radius, radius, size=(n, dim))
    return t, x, y


def validate_assumptions(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    """Runtime proxies for the standing assumptions; diagnostics only.

    Rows: drift Lipschitz constant, density-gradient finite-difference error,
    h-drift convergence in eta, and the exit-probability trend.
    """
    v = cfg.data["validate"]
    model = cfg.model()
    rng = np.random.default_rng(cfg.seed)
    rows = []

    lip = sampled_lipschitz(model, v["delta"], v["radius"], v["n_samples"], cfg.seed)
    rows.append({"proxy": "drift_lipschitz", "value": lip,
                 "status": "pass" if math.isfinite(lip) else "warn",
                 "detail": f"delta={v['delta']}, radius={v['radius']}"})

    t, x, y = _sample_points(rng, v["n_samples"], model.dim, v["radius"], v["delta"])
    worst = 0.0
    h = 1e-6
    for k in range(len(t)):
        g = model.transition_log_gradient_x(t[k], x[k], 1.0, y[k])
        for j in range(model.dim):
            e = np.zeros(model.dim)
            e[j] = h
            fd = (model.transition_log_density(t[k], x[k] + e, 1.0, y[k])
                  - model.transition_log_density(t[k], x[k] - e, 1.0, y[k])) / (2 * h)
            worst = max(worst, abs(fd - g[j]) / max(1.0, abs(g[j])))
    rows.append({"proxy": "density_gradient_fd", "value": worst,
                 "status": "pass" if worst <= 1e-5 else "warn", "detail": "relative error"})

    devs = []
    for eta in v["etas"]:
        m = model.with_eta(eta)
        d = max(float(np.max(np.abs(bridge_drift(m, t[k], x[k], y[k])
                                     - bridge_drift(m, t[k], x[k], y[k], limit=True))))
                for k in range(len(t)))
        devs.append(d)
    ok = devs[-1] <= 1e-8 or all(b <= a for a, b in zip(devs, devs[1:]))
    rows.append({"proxy": "h_drift_eta_convergence", "value": max(devs),
                 "status": "pass" if ok else "warn", "detail": devs})

    radius = v["exit_radius"]
    if radius is None or not math.isfinite(radius):
        rows.append({"proxy": "exit_probability", "value": 0.0, "status": "pass",
                     "detail": "radius = inf"})
    else:
        spec = cfg.bridge() if "bridge" in cfg.data else BridgeSpec(
            model, np.zeros(model.dim), np.zeros(model.dim))
        sweep = exit_probability_sweep(spec, radius, v["etas"], cfg.sim_config(),
                                       threads=threads)
        freqs = [r["frequency"] for r in sweep]
        ok = all(b <= a for a, b in zip(freqs, freqs[1:]))
        rows.append({"proxy": "exit_probability", "value": freqs[-1],
                     "status": "pass" if ok else "warn", "detail": sweep})
    return rows


def run_validate(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    ensure_dir(out_dir)
    rows = validate_assumptions(cfg, threads)
    files = [write_csv(os.path.join(out_dir, "validate.csv"), ["proxy", "status", "value"], rows)]
    summary = {"rows": rows, "pass": all(r["status"] == "pass" for r in rows)}
    files.append(write_json(os.path.join(out_dir, "summary.json"), summary))
    write_manifest(out_dir, cfg, "validate", files)
    return summary


RUNNERS = {
    "simulate": run_simulate,
    "sinkhorn": run_sinkhorn,
    "rate": run_rate,
    "minimize": run_minimize,
    "laplace-sweep": run_laplace_sweep,
    "uniform-scan": run_uniform_scan,
    "ldp-check": run_ldp_check,
    "run-dynamic-sb": run_dynamic_sb,
    "validate": run_validate,
}

__all__ = ["RUNNERS", "run_dynamic_sb", "validate_assumptions", "endpoint_chi2", "perturbed_line",
           "write_manifest"] + [f.__name__ for f in RUNNERS.values()]
