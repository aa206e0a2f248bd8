"""
Path simulation for reference diffusions and their bridges.

Bridge drifts blow up like 1/(1 - t), so Euler-Maruyama bridges are integrated
only while the step ends before ``1 - delta_pin``; the remaining grid points are
interpolated linearly onto the pinned endpoint. The ``exact_gaussian`` scheme
samples the Gaussian bridge transition of BM/OU exactly and serves as the
discretisation-free reference.

Randomness comes from :mod:`sbldp.streams`: each block of paths owns a Philox
key ``(seed, stage, block)``, so batches are identical for any thread count.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import streams
from .errors import DomainExitWarning, GridMismatch, MissingDensity
from .model import (
    DEFAULT_DELTA_PIN,
    BridgeSpec,
    DiffusionModel,
    _decay,
    _unit_variance,
    apply_diffusion,
    bridge_drift,
    reversal_drift_from,
)

SCHEMES = ("euler_maruyama", "exact_gaussian")
_PIN_EPS = 1e-12


@dataclass(frozen=True)
class SimConfig:
    """Time stepping and batching parameters.

    ``delta_pin=None`` resolves to ``max(1e-3, 1/n_steps)``. ``refine_terminal``
    halves the last 10% of the uniform steps.
    """

    n_steps: int = 200
    delta_pin: Optional[float] = None
    scheme: str = "euler_maruyama"
    batch: int = 1000
    seed: int = 0
    refine_terminal: bool = False

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.delta_pin is None:
            object.__setattr__(self, "delta_pin", max(DEFAULT_DELTA_PIN, 1.0 / self.n_steps))
        if not 0.0 < self.delta_pin < 0.5:
            raise ValueError("delta_pin must lie in (0, 0.5)")
        if self.delta_pin < 1.0 / self.n_steps - _PIN_EPS:
            raise ValueError("delta_pin must be >= 1/n_steps")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def time_grid(self) -> np.ndarray:
        base = np.linspace(0.0, 1.0, self.n_steps + 1)
        if not self.refine_terminal:
            return base
        m = math.ceil(0.1 * self.n_steps)
        head = base[: self.n_steps - m + 1]
        tail = np.linspace(base[self.n_steps - m], 1.0, 2 * m + 1)[1:]
        return np.concatenate([head, tail])

    def replace(self, **kw) -> "SimConfig":
        d = self.to_dict()
        if "n_steps" in kw and "delta_pin" not in kw:
            d["delta_pin"] = None
        d.update(kw)
        return SimConfig(**d)

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "delta_pin": self.delta_pin, "scheme": self.scheme,
                "batch": self.batch, "seed": self.seed, "refine_terminal": self.refine_terminal}


@dataclass(frozen=True)
class PathSample:
    """One discretised path on ``times``."""

    times: np.ndarray
    states: np.ndarray
    seed: int = 0
    path_id: int = 0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if len(times) != len(states):
            raise ValueError("times and states must have equal length")
        if times[0] != 0.0 or times[-1] != 1.0 or np.any(np.diff(times) <= 0):
            raise ValueError("times must increase strictly from 0 to 1")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


@dataclass(frozen=True)
class PathBatch:
    """A batch of paths plus run metadata.

    ``states`` has shape ``(batch, n_steps + 1, d)``; it is ``None`` when the run
    was reduced through ``observe``, in which case ``observed`` holds the
    per-path observations. For controlled runs ``noise_integral`` holds
    ``sum_k nu_k . dW_k`` per path and ``control_energy`` the deterministic
    ``1/2 sum |nu_k|^2 dt``.
    """

    times: np.ndarray
    states: Optional[np.ndarray]
    seed: int
    exit_count: int = 0
    exit_radius: float = math.inf
    observed: Optional[np.ndarray] = None
    noise_integral: Optional[np.ndarray] = None
    control_energy: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        if self.states is not None:
            return len(self.states)
        return len(self.observed)

    def path(self, i: int) -> PathSample:
        return PathSample(self.times, self.states[i], self.seed, i)

    def marginal(self, t: float) -> np.ndarray:
        """States at the grid time closest to ``t``, shape ``(batch, d)``."""
        k = int(np.argmin(np.abs(self.times - t)))
        return self.states[:, k]

    def metadata(self) -> dict:
        out = {"seed": self.seed, "batch": len(self), "n_steps": len(self.times) - 1,
               "exit_count": self.exit_count,
               "exit_radius": None if math.isinf(self.exit_radius) else self.exit_radius}
        out.update(self.meta)
        return out


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant control: ``values[k]`` acts on ``[times[k], times[k+1])``.

    ``residual`` is the sup-norm re-integration error left by control recovery.
    """

    times: np.ndarray
    values: np.ndarray
    residual: float = 0.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if len(values) != len(times) - 1:
            raise ValueError("a control needs one value per grid interval")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, times, dim: int) -> "ControlPath":
        times = np.asarray(times, dtype=float)
        return cls(times, np.zeros((len(times) - 1, dim)))

    @classmethod
    def constant(cls, times, value) -> "ControlPath":
        times = np.asarray(times, dtype=float)
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(times, np.tile(value, (len(times) - 1, 1)))

    def energy(self) -> float:
        dt = np.diff(self.times)
        return 0.5 * float(np.sum(np.sum(self.values ** 2, axis=-1) * dt))

    def scaled(self, c: float) -> "ControlPath":
        return ControlPath(self.times, c * self.values)


def _n_free(times, delta_pin):
    """Number of Euler steps whose right end lies in ``[0, 1 - delta_pin]``."""
    return int(np.sum(times[1:] <= 1.0 - delta_pin + _PIN_EPS))


def _pin_tail(states, times, n_free, end):
    if n_free >= len(times) - 1:
        states[:, -1] = end
        return
    t0 = times[n_free]
    x0 = states[:, n_free]
    for k in range(n_free + 1, len(times)):
        w = (times[k] - t0) / (1.0 - t0)
        states[:, k] = (1.0 - w) * x0 + w * end
    states[:, -1] = end


def _as_rows(v, n, d):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return np.broadcast_to(v, (n, d))
    if v.shape != (n, d):
        raise ValueError("per-path endpoints must have shape (batch, d)")
    return v


class _Run:
    """One batched simulation job, evaluated block by block."""

    def __init__(self, model, times, start, cfg, stage, *, end=None, pinned=False,
                 drift=None, sigma_time=None, control=None, scheme="euler_maruyama",
                 radius=math.inf, observe=None, keep_states=True, reverse=False):
        self.model = model
        self.times = times
        self.cfg = cfg
        self.stage = stage
        self.start = start
        self.end = end
        self.pinned = pinned
        self.drift = drift
        self.sigma_time = sigma_time or (lambda t: t)
        self.control = control
        self.scheme = scheme
        self.radius = radius
        self.observe = observe
        self.keep_states = keep_states
        self.reverse = reverse
        self.n_free = _n_free(times, cfg.delta_pin) if pinned else len(times) - 1

    def block(self, item):
        bi, lo, hi = item
        model, times = self.model, self.times
        n, d, b = len(times) - 1, model.dim, hi - lo
        rng = streams.generator(self.cfg.seed, self.stage, bi)
        noise = rng.standard_normal((n, b, d))
        start = np.array(self.start[lo:hi], dtype=float)
        end = None if self.end is None else np.asarray(self.end[lo:hi], dtype=float)
        states = np.empty((b, n + 1, d))
        states[:, 0] = start
        dts = np.diff(times)
        sqrt_eta = math.sqrt(model.eta)
        stoch = np.zeros(b) if self.control is not None else None

        if self.scheme == "exact_gaussian":
            self._exact(states, noise, start, end)
        else:
            x = start
            for k in range(self.n_free):
                t, dt = times[k], dts[k]
                dw = noise[k] * math.sqrt(dt)
                mu = self.drift(k, t, x, end)
                if self.control is not None:
                    nu = self.control.values[k]
                    mu = mu + apply_diffusion(model, t, x, np.broadcast_to(nu, x.shape))
                    stoch += dw @ nu
                x = x + mu * dt + sqrt_eta * apply_diffusion(model, self.sigma_time(t), x, dw)
                states[:, k + 1] = x
            if self.pinned:
                _pin_tail(states, times, self.n_free, end)
        if self.reverse:
            states = states[:, ::-1].copy()
        exits = int(np.sum(np.max(np.abs(states), axis=(1, 2)) > self.radius))
        obs = self.observe(states, self.out_times) if self.observe is not None else None
        return (states if self.keep_states else None), exits, obs, stoch

    def _exact(self, states, noise, x, y):
        theta, eta, times = self.model.theta, self.model.eta, self.times
        for k in range(len(times) - 1):
            t0, t1 = times[k], times[k + 1]
            if t1 >= 1.0:
                x = y
            else:
                a1, v1 = _decay(theta, t1 - t0), _unit_variance(theta, t1 - t0)
                a2, v2 = _decay(theta, 1.0 - t1), _unit_variance(theta, 1.0 - t1)
                den = v2 + a2 * a2 * v1
                mean = (a1 * v2 * x + a2 * v1 * y) / den
                x = mean + math.sqrt(eta * v1 * v2 / den) * noise[k]
            states[:, k + 1] = x

    @property
    def out_times(self):
        return (1.0 - self.times[::-1]) if self.reverse else self.times

    def run(self, threads=1) -> PathBatch:
        items = streams.blocks(len(self.start))
        parts = streams.map_ordered(self.block, items, threads)
        states = np.concatenate([p[0] for p in parts]) if self.keep_states else None
        exits = sum(p[1] for p in parts)
        observed = np.concatenate([p[2] for p in parts]) if self.observe is not None else None
        stoch = np.concatenate([p[3] for p in parts]) if self.control is not None else None
        energy = 0.0
        if self.control is not None:
            dt = np.diff(self.times)[: self.n_free]
            energy = 0.5 * float(np.sum(np.sum(self.control.values[: self.n_free] ** 2, axis=-1) * dt))
        if exits and math.isfinite(self.radius) and self.radius == self.model.domain_radius:
            warnings.warn(f"{exits} path(s) left the domain box of radius {self.radius}",
                          DomainExitWarning, stacklevel=3)
        return PathBatch(self.out_times, states, self.cfg.seed, exits, self.radius, observed,
                         stoch, energy, {"scheme": self.scheme, "stage": self.stage,
                                         "delta_pin": self.cfg.delta_pin})


def simulate_forward(model: DiffusionModel, x0, cfg: SimConfig, *, threads: int = 1,
                     observe: Optional[Callable] = None, radius: Optional[float] = None) -> PathBatch:
    """Euler-Maruyama paths of the unconditioned reference started at ``x0``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if np.max(np.abs(x0)) > model.domain_radius:
        raise ValueError("x0 lies outside domain_radius")
    times = cfg.time_grid()
    start = np.broadcast_to(x0, (cfg.batch, model.dim))

    def drift(k, t, x, end):
        return np.asarray(model.drift(t, x), dtype=float)

    run = _Run(model, times, start, cfg, "forward", drift=drift,
               radius=model.domain_radius if radius is None else radius,
               observe=observe, keep_states=observe is None)
    return run.run(threads)


def _bridge_run(model, start, end, cfg, *, control=None, observe=None, radius=None,
                scheme=None):
    scheme = cfg.scheme if scheme is None else scheme
    if control is not None:
        scheme = "euler_maruyama"
    if scheme == "exact_gaussian" and not model.is_linear:
        raise MissingDensity("exact_gaussian bridges exist only for BM/OU")
    times = cfg.time_grid()
    if control is not None:
        if len(control.times) != len(times) or np.max(np.abs(control.times - times)) > 1e-12:
            raise GridMismatch("control grid does not match the simulation grid")
        if control.values.shape[-1] != model.dim:
            raise GridMismatch("control dimension does not match the model")

    def drift(k, t, x, y):
        return np.asarray(model.drift(t, x), dtype=float) + bridge_drift(model, t, x, y)

    return _Run(model, times, start, cfg, "bridge", end=end, pinned=True, drift=drift,
                control=control, scheme=scheme,
                radius=model.domain_radius if radius is None else radius,
                observe=observe, keep_states=observe is None)


def simulate_bridge(spec: BridgeSpec, cfg: SimConfig, *, threads: int = 1,
                    observe: Optional[Callable] = None, radius: Optional[float] = None) -> PathBatch:
    """Endpoint-pinned bridge paths from ``spec.x`` to ``spec.y``."""
    n, d = cfg.batch, spec.model.dim
    run = _bridge_run(spec.model, np.broadcast_to(spec.x, (n, d)), np.broadcast_to(spec.y, (n, d)),
                      cfg, observe=observe, radius=radius)
    return run.run(threads)


def simulate_bridges_between(model: DiffusionModel, starts, ends, cfg: SimConfig, *,
                             threads: int = 1, observe: Optional[Callable] = None,
                             stage: str = "bridge") -> PathBatch:
    """Bridges with per-path endpoints; ``starts`` and ``ends`` have shape (batch, d)."""
    starts = np.asarray(starts, dtype=float)
    ends = np.asarray(ends, dtype=float)
    n = len(starts)
    run = _bridge_run(model, _as_rows(starts, n, model.dim), _as_rows(ends, n, model.dim),
                      cfg.replace(batch=n), observe=observe)
    run.stage = stage
    return run.run(threads)


def simulate_controlled_bridge(spec: BridgeSpec, control: ControlPath, cfg: SimConfig, *,
                               threads: int = 1, observe: Optional[Callable] = None,
                               radius: Optional[float] = None) -> PathBatch:
    """Bridges with the extra drift ``sigma nu_t``; same noise as :func:`simulate_bridge`."""
    n, d = cfg.batch, spec.model.dim
    run = _bridge_run(spec.model, np.broadcast_to(spec.x, (n, d)), np.broadcast_to(spec.y, (n, d)),
                      cfg, control=control, observe=observe, radius=radius)
    return run.run(threads)


def simulate_reversed_bridge(spec: BridgeSpec, cfg: SimConfig, *, threads: int = 1,
                             observe: Optional[Callable] = None,
                             radius: Optional[float] = None) -> PathBatch:
    """Bridge built by running the time-reversed SDE from ``y`` back to ``x``.

    The returned states are indexed in forward time.
    """
    model = spec.model
    n, d = cfg.batch, model.dim
    times = 1.0 - cfg.time_grid()[::-1]
    times[0], times[-1] = 0.0, 1.0
    x = spec.x

    def drift(k, s, xhat, end):
        back = -np.asarray(model.drift(1.0 - s, xhat), dtype=float)
        return back + reversal_drift_from(model, s, xhat, x)

    run = _Run(model, times, np.broadcast_to(spec.y, (n, d)), cfg, "reversed",
               end=np.broadcast_to(spec.x, (n, d)), pinned=True, drift=drift,
               sigma_time=lambda s: 1.0 - s,
               radius=model.domain_radius if radius is None else radius,
               observe=observe, keep_states=observe is None, reverse=True)
    return run.run(threads)


def modulus_of_continuity(states: np.ndarray, times: np.ndarray, delta: float) -> np.ndarray:
    """Per-path ``sup_{|t - s| <= delta} |X_t - X_s|`` over grid pairs."""
    states = np.asarray(states, dtype=float)
    best = np.zeros(states.shape[0])
    n = len(times)
    for lag in range(1, n):
        span = times[lag:] - times[:-lag]
        ok = span <= delta + _PIN_EPS
        if not np.any(ok):
            break
        diff = np.linalg.norm(states[:, lag:] - states[:, :-lag], axis=-1)[:, ok]
        best = np.maximum(best, diff.max(axis=1))
    return best


def terminal_deviation(states: np.ndarray, times: np.ndarray, y, delta: float) -> np.ndarray:
    """Per-path ``sup_{t in [1 - delta, 1]} |X_t - y|``."""
    sel = times >= 1.0 - delta - _PIN_EPS
    dev = np.linalg.norm(np.asarray(states)[:, sel] - np.asarray(y, dtype=float), axis=-1)
    return dev.max(axis=1)


def exit_probability_sweep(spec: BridgeSpec, radius: float, etas, cfg: SimConfig, *,
                           threads: int = 1) -> list[dict]:
    """Monte Carlo frequency of leaving the box ``|x|_inf <= radius`` per eta.

    Rows with no exit are flagged ``below_resolution`` (frequency < 1/batch).
    """
    if radius <= max(np.max(np.abs(spec.x)), np.max(np.abs(spec.y))):
        raise ValueError("radius must exceed the endpoint norms")
    rows = []
    for eta in etas:
        model = spec.model.with_eta(eta)
        sub = BridgeSpec(model, spec.x, spec.y)
        batch = simulate_bridge(sub, cfg, threads=threads, radius=radius,
                                observe=lambda s, t: np.zeros(len(s)))
        freq = batch.exit_count / cfg.batch
        rows.append({
            "eta": float(eta),
            "exits": batch.exit_count,
            "frequency": freq,
            "eta_log_p": float(eta * math.log(freq)) if freq > 0 else None,
            "below_resolution": batch.exit_count == 0,
            "resolution": 1.0 / cfg.batch,
        })
    return rows


__all__ = [
    "SimConfig", "PathSample", "PathBatch", "ControlPath", "simulate_forward",
    "simulate_bridge", "simulate_bridges_between", "simulate_controlled_bridge",
    "simulate_reversed_bridge", "modulus_of_continuity", "terminal_deviation",
    "exit_probability_sweep",
]
