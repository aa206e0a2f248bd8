"""
Monte Carlo Laplace functionals of bridges and small-noise convergence checks.

For a bounded path functional F the Laplace value at noise level eta is

    F_eta(x, y) = -eta log E[exp(-F(X^{eta,xy}) / eta)],

and it converges to the variational value ``inf_phi F(phi) + I_B(phi)`` computed
by :func:`sbldp.action.minimize_action`. Estimates are reported with a
delta-method standard error of the log-mean.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .action import minimize_action
from .eot import DiscreteMarginal, build_cost, sample_static_coupling, sinkhorn, static_rate, exact_ot
from .errors import BudgetExceeded, DegenerateSample, LowEffectiveSampleSize, GridMismatch
from .functionals import PathFunctional, TubePenalty
from .model import BridgeSpec, DiffusionModel
from .simulate import (
    ControlPath,
    SimConfig,
    simulate_bridge,
    simulate_bridges_between,
    simulate_controlled_bridge,
)

CONTROLLED_BELOW = 0.05
MIN_ESS = 100


@dataclass(frozen=True)
class LaplaceEstimate:
    """Estimate, standard error and weight diagnostics; unpacks as ``(estimate, stderr)``."""

    estimate: float
    stderr: float
    ess: float
    batch: int
    eta: float
    estimator: str = "naive"

    def __iter__(self):
        yield self.estimate
        yield self.stderr


def _log_mean_exp(a, eta, estimator, clip=None) -> LaplaceEstimate:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise DegenerateSample("non-finite log-weights in the sample")
    a0 = float(np.min(a))
    w = np.exp(-(a - a0) / eta)
    if len(w) > 1 and np.count_nonzero(w) == np.count_nonzero(a == a0) < len(w):
        raise DegenerateSample("every weight but the largest underflows; "
                               "use the controlled estimator")
    mean = float(np.mean(w))
    est = a0 - eta * math.log(mean)
    if clip is not None:
        est = min(max(est, clip[0]), clip[1])
    b = len(w)
    sd = float(np.std(w, ddof=1)) if b > 1 else 0.0
    se = eta * sd / (mean * math.sqrt(b))
    ess = float(np.sum(w) ** 2 / np.sum(w * w))
    if ess < MIN_ESS:
        warnings.warn(f"effective sample size {ess:.1f} below {MIN_ESS}",
                      LowEffectiveSampleSize, stacklevel=3)
    return LaplaceEstimate(est, se, ess, b, eta, estimator)


def _observer(functional):
    return lambda states, times: functional(times, states)


def estimate_laplace(spec: BridgeSpec, functional: PathFunctional, cfg: SimConfig, *,
                     threads: int = 1) -> LaplaceEstimate:
    """Naive estimate of ``-eta log E[exp(-F / eta)]`` over simulated bridges.

    Raises
    ------
    DegenerateSample
        every weight except the largest underflows (or a value is not finite).
    """
    eta = spec.model.eta
    batch = simulate_bridge(spec, cfg, threads=threads, observe=_observer(functional))
    f = batch.observed
    return _log_mean_exp(f, eta, "naive", clip=(float(np.min(f)), float(np.max(f))))


def energy_budget(functional: PathFunctional) -> float:
    """``M = 2 sup|F| + 1``."""
    return 2.0 * functional.bound + 1.0


def _controlled_batch(spec, functional, control, cfg, threads):
    if control.energy() > energy_budget(functional):
        raise BudgetExceeded(f"control energy {control.energy():.4g} exceeds "
                             f"budget {energy_budget(functional):.4g}")
    return simulate_controlled_bridge(spec, control, cfg, threads=threads,
                                      observe=_observer(functional))


def estimate_laplace_controlled(spec: BridgeSpec, functional: PathFunctional,
                                control: ControlPath, cfg: SimConfig, *,
                                threads: int = 1) -> LaplaceEstimate:
    """Importance-sampling estimate under bridges with extra drift ``sigma nu``.

    Each path gets the weight ``exp(-(F + sqrt(eta) int nu.dW + 1/2 int |nu|^2) / eta)``,
    which is unbiased for ``E[exp(-F / eta)]``. With ``nu = 0`` the noise and
    the result coincide with :func:`estimate_laplace`.
    """
    eta = spec.model.eta
    batch = _controlled_batch(spec, functional, control, cfg, threads)
    a = batch.observed + math.sqrt(eta) * batch.noise_integral + batch.control_energy
    if not np.any(control.values):
        clip = (float(np.min(batch.observed)), float(np.max(batch.observed)))
    else:
        clip = (-functional.bound, functional.bound)
    return _log_mean_exp(a, eta, "controlled", clip=clip)


def representation_cost(spec: BridgeSpec, functional: PathFunctional, control: ControlPath,
                        cfg: SimConfig, *, threads: int = 1) -> tuple[float, float]:
    """Monte Carlo ``E[F(X^nu)] + 1/2 int |nu|^2`` and its standard error.

    By the variational representation this upper-bounds the Laplace value.
    """
    batch = _controlled_batch(spec, functional, control, cfg, threads)
    f = batch.observed
    se = float(np.std(f, ddof=1) / math.sqrt(len(f))) if len(f) > 1 else 0.0
    return float(np.mean(f)) + batch.control_energy, se


def trend_slope(etas, gaps, floor: float = 1e-12) -> float:
    """Least-squares slope of ``log gap`` against ``log(1 / eta)``.

    Negative values mean the gap shrinks as eta decreases.
    """
    u = np.log(1.0 / np.asarray(etas, dtype=float))
    v = np.log(np.asarray(gaps, dtype=float) + floor)
    if len(u) < 2 or np.ptp(u) == 0:
        return 0.0
    return float(np.polyfit(u, v, 1)[0])


@dataclass(frozen=True)
class LaplaceSweepResult:
    """Per-eta estimates against the variational value, rows by decreasing eta."""

    rows: list
    variational: float
    slope: float
    meta: dict = field(default_factory=dict)

    COLUMNS = ("eta", "estimate", "stderr", "variational", "gap", "estimator", "ess")

    @property
    def gaps(self):
        return [r["gap"] for r in self.rows]

    def passes(self, rel_tol: float = 0.1) -> bool:
        final = self.rows[-1]["gap"]
        return self.slope < 0 and final <= rel_tol * (1.0 + abs(self.variational))

    def summary(self, rel_tol: float = 0.1) -> dict:
        return {"variational": self.variational, "trend_slope": self.slope,
                "final_gap": self.rows[-1]["gap"], "pass": self.passes(rel_tol),
                **self.meta}


def _check_etas(etas):
    etas = [float(e) for e in etas]
    if any(b >= a for a, b in zip(etas, etas[1:])):
        raise ValueError("etas must be strictly decreasing")
    if not etas or etas[-1] <= 0:
        raise ValueError("etas must be positive")
    return etas


def variational_value(spec: BridgeSpec, functional: PathFunctional, cfg: SimConfig, **kw):
    """Minimum-action solution on the simulation grid."""
    return minimize_action(spec, functional, times=cfg.time_grid(), **kw)


def _estimate_at(spec, functional, cfg, eta, control, controlled_below, threads):
    sub = BridgeSpec(spec.model.with_eta(eta), spec.x, spec.y)
    if eta <= controlled_below:
        return estimate_laplace_controlled(sub, functional, control, cfg, threads=threads)
    return estimate_laplace(sub, functional, cfg, threads=threads)


def laplace_sweep(spec: BridgeSpec, functional: PathFunctional, etas, cfg: SimConfig, *,
                  controlled_below: float = CONTROLLED_BELOW, threads: int = 1,
                  minimizer: Optional[dict] = None) -> LaplaceSweepResult:
    """Laplace estimates over decreasing ``etas`` with the variational limit.

    For ``eta <= controlled_below`` the controlled estimator runs with the
    control recovered from the minimum-action path.
    """
    etas = _check_etas(etas)
    opt = variational_value(spec, functional, cfg, **(minimizer or {}))
    rows = []
    for eta in etas:
        est = _estimate_at(spec, functional, cfg, eta, opt.control, controlled_below, threads)
        rows.append({"eta": eta, "estimate": est.estimate, "stderr": est.stderr,
                     "variational": opt.value, "gap": abs(est.estimate - opt.value),
                     "estimator": est.estimator, "ess": est.ess})
    slope = trend_slope(etas, [r["gap"] for r in rows])
    meta = {"batch": cfg.batch, "seed": cfg.seed, "functional": functional.to_dict(),
            "scheme": cfg.scheme, "n_steps": cfg.n_steps}
    return LaplaceSweepResult(rows, opt.value, slope, meta)


@dataclass(frozen=True)
class UniformScanResult:
    """Per-pair rows plus the per-eta maximum gap over the endpoint set."""

    rows: list
    max_gaps: list
    slope: float
    variational: list
    continuity_constant: float

    COLUMNS = ("eta", "x", "y", "estimate", "stderr", "variational", "gap", "estimator")

    @property
    def decreasing(self) -> bool:
        return self.max_gaps[-1]["max_gap"] < self.max_gaps[0]["max_gap"]

    def summary(self) -> dict:
        return {"max_gaps": self.max_gaps, "trend_slope": self.slope,
                "decreasing": self.decreasing,
                "continuity_constant": self.continuity_constant}


def continuity_constant(pairs, values) -> float:
    """Largest ``|F(p) - F(q)| / |p - q|`` over nearest-neighbour endpoint pairs."""
    pts = np.array([np.concatenate([np.ravel(x), np.ravel(y)]) for x, y in pairs], dtype=float)
    vals = np.asarray(values, dtype=float)
    if len(pts) < 2:
        return 0.0
    dist = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
    step = np.min(dist[dist > 0])
    best = 0.0
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if 0 < dist[i, j] <= step * (1 + 1e-9):
                best = max(best, abs(vals[i] - vals[j]) / dist[i, j])
    return best


def uniform_scan(model: DiffusionModel, functional: PathFunctional, pairs, etas,
                 cfg: SimConfig, *, controlled_below: float = CONTROLLED_BELOW,
                 threads: int = 1, minimizer: Optional[dict] = None) -> UniformScanResult:
    """Laplace gaps over a finite set of endpoint pairs and their maximum per eta."""
    etas = _check_etas(etas)
    specs = [BridgeSpec(model, x, y) for x, y in pairs]
    opts = [variational_value(s, functional, cfg, **(minimizer or {})) for s in specs]
    rows, max_gaps = [], []
    for eta in etas:
        gaps = []
        for spec, opt in zip(specs, opts):
            est = _estimate_at(spec, functional, cfg, eta, opt.control, controlled_below, threads)
            gap = abs(est.estimate - opt.value)
            gaps.append(gap)
            rows.append({"eta": eta, "x": spec.x.tolist(), "y": spec.y.tolist(),
                         "estimate": est.estimate, "stderr": est.stderr,
                         "variational": opt.value, "gap": gap, "estimator": est.estimator})
        k = int(np.argmax(gaps))
        max_gaps.append({"eta": eta, "max_gap": gaps[k], "argmax": k})
    slope = trend_slope(etas, [m["max_gap"] for m in max_gaps])
    values = [o.value for o in opts]
    return UniformScanResult(rows, max_gaps, slope, values,
                             continuity_constant([(s.x, s.y) for s in specs], values))


# Tube probabilities of the dynamic bridge.

def in_tube(states, times, center, radius) -> np.ndarray:
    """Per-path indicator of ``sup_k |phi_k - center_k| <= radius``."""
    dev = np.linalg.norm(np.asarray(states) - np.asarray(center), axis=-1)
    return np.max(dev, axis=-1) <= radius


def tube_rate(model: DiffusionModel, mu: DiscreteMarginal, nu: DiscreteMarginal, center,
              radius: float, times, *, tol: float = 1e-4, weight: float = 10.0,
              max_doublings: int = 30, seed: int = 0) -> dict:
    """``inf`` of ``I_D`` over the tube around ``center`` (soft-penalty solve).

    Endpoint pairs are the support atoms within ``radius`` of the tube's end
    slices; for each, the tube penalty weight doubles until the violation is
    at most ``tol``. Returns the best rate and the pair that attains it.
    """
    center = np.asarray(center, dtype=float)
    if center.ndim == 1:
        center = center[:, None]
    times = np.asarray(times, dtype=float)
    cost = build_cost(model, mu, nu, "limit")
    ot = exact_ot(cost, mu, nu)
    best = {"rate": math.inf, "i_s": None, "i_b": None, "x": None, "y": None}
    for x in mu.atoms:
        if np.linalg.norm(x - center[0]) > radius:
            continue
        for y in nu.atoms:
            if np.linalg.norm(y - center[-1]) > radius:
                continue
            i_s = max(static_rate(ot, x, y), 0.0)
            spec = BridgeSpec(model, x, y)
            w = weight
            for _ in range(max_doublings):
                pen = TubePenalty(params={"center": center, "radius": radius, "weight": w})
                res = minimize_action(spec, pen, times=times, seed=seed,
                                      extra_starts=[center + 0.0])
                viol = float(pen.violation(times, res.path.states))
                if viol <= tol:
                    break
                w *= 2.0
            i_b = res.rate
            if i_s + i_b < best["rate"]:
                best = {"rate": i_s + i_b, "i_s": i_s, "i_b": i_b,
                        "x": x.tolist(), "y": y.tolist(), "violation": viol, "weight": w}
    return best


def dynamic_plan(model: DiffusionModel, mu: DiscreteMarginal, nu: DiscreteMarginal):
    """Entropic plan of the static problem at the model's noise level."""
    cost = build_cost(model, mu, nu, "limit")
    return sinkhorn(cost, mu, nu, model.eta)


def sample_dynamic(model: DiffusionModel, mu: DiscreteMarginal, nu: DiscreteMarginal,
                   cfg: SimConfig, *, threads: int = 1, observe=None, plan=None):
    """Dynamic bridge samples: coupling draws interpolated by bridges."""
    plan = dynamic_plan(model, mu, nu) if plan is None else plan
    xs, ys = sample_static_coupling(plan, cfg.batch, cfg.seed, mu=mu, nu=nu)
    return xs, ys, simulate_bridges_between(model, xs, ys, cfg, threads=threads,
                                            observe=observe, stage="dynamic")


def tube_probability_check(model: DiffusionModel, mu: DiscreteMarginal, nu: DiscreteMarginal,
                           center, radius: float, etas, cfg: SimConfig, *,
                           threads: int = 1, rate: Optional[dict] = None) -> dict:
    """Empirical ``-eta log P(tube)`` of the dynamic bridge against ``inf_tube I_D``.

    Rows with no hit report the resolution bound ``eta log(batch)`` and set
    ``zero_hits``; the true value is at least that large.
    """
    etas = _check_etas(etas)
    times = cfg.time_grid()
    center = np.asarray(center, dtype=float)
    if center.ndim == 1:
        center = center[:, None]
    if len(center) != len(times):
        raise GridMismatch("tube center must live on the simulation grid")
    if rate is None:
        rate = tube_rate(model, mu, nu, center, radius, times, seed=cfg.seed)
    inf_rate = rate["rate"]
    rows = []
    for eta in etas:
        sub = model.with_eta(eta)
        _, _, batch = sample_dynamic(sub, mu, nu, cfg, threads=threads,
                                     observe=lambda s, t: in_tube(s, t, center, radius))
        hits = int(np.sum(batch.observed))
        freq = hits / cfg.batch
        if hits:
            val = -eta * math.log(freq)
            se = eta * math.sqrt((1 - freq) / (hits))
        else:
            val, se = eta * math.log(cfg.batch), math.inf
        gap = abs(val - inf_rate) if math.isfinite(inf_rate) else math.inf
        rows.append({"eta": eta, "hits": hits, "frequency": freq, "minus_eta_log_p": val,
                     "stderr": se, "inf_rate": inf_rate, "gap": gap, "zero_hits": hits == 0})
    finite = [r for r in rows if math.isfinite(r["gap"])]
    slope = trend_slope([r["eta"] for r in finite], [r["gap"] for r in finite]) if finite else 0.0
    return {"rows": rows, "inf_rate": rate, "trend_slope": slope}


__all__ = [
    "LaplaceEstimate", "estimate_laplace", "estimate_laplace_controlled", "energy_budget",
    "representation_cost", "trend_slope", "LaplaceSweepResult", "laplace_sweep",
    "variational_value", "UniformScanResult", "uniform_scan", "continuity_constant",
    "in_tube", "tube_rate", "dynamic_plan", "sample_dynamic", "tube_probability_check",
]
