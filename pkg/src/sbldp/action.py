"""
Rate functions of bridges: control recovery, action values and minimum action.

For a path phi on a grid the feasible control solves

    phi' = b(t, phi) + [g^y(t, phi)] + sigma(t, phi) nu,

where ``g^y`` is the small-noise limit of the h-transform drift (``with_g``) or
is omitted (``without_g``). Controls are recovered interval by interval with
the forward difference quotient on the left and b, g, sigma evaluated at the
interval midpoint ``(t_{k+1/2}, (phi_k + phi_{k+1}) / 2)``. The midpoint rule is
second order and never evaluates g at t = 1.

The bridge rate is ``I_B(phi) = 1/2 sum_k |nu_k|^2 dt_k`` for the ``with_g``
control of an endpoint-pinned path.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import streams
from .eot import ExactOT, static_rate
from .errors import NoConvergenceWarning, NonAbsolutelyContinuous, SingularDiffusion
from .functionals import Constant, PathFunctional
from .model import (
    BridgeSpec,
    DiffusionModel,
    _decay,
    _unit_variance,
    bridge_drift,
    deterministic_flow,
    diffusion_matrix,
)
from .simulate import ControlPath, PathSample

PARAMETERIZATIONS = ("with_g", "without_g")
TIE_TOL = 1e-9
_FD_STEP = 1e-6


def _check_param(parameterization):
    if parameterization not in PARAMETERIZATIONS:
        raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")


def _linear_coeffs(model, times, with_g):
    """Midpoint coefficients of the linear drift ``m(t) x + r(t) y`` per interval."""
    tm = 0.5 * (times[1:] + times[:-1])
    m = np.full(len(tm), -model.theta)
    r = np.zeros(len(tm))
    if with_g:
        tau = 1.0 - tm
        a = _decay(model.theta, tau)
        v = _unit_variance(model.theta, tau)
        m = m - a * a / v
        r = a / v
    return m, r


def _generic_local(model, t, left, right, dt, y, with_g):
    mid = 0.5 * (left + right)
    h = np.asarray(model.drift(t, mid), dtype=float)
    if with_g:
        h = h + bridge_drift(model, t, mid, y, limit=True)
    sig = diffusion_matrix(model, t, mid)
    try:
        if np.linalg.cond(sig) > 1e12:
            raise np.linalg.LinAlgError
        return np.linalg.solve(sig, (right - left) / dt - h)
    except np.linalg.LinAlgError:
        raise SingularDiffusion(f"sigma is singular at t = {t}") from None


def local_controls(model: DiffusionModel, y, times, states, *, with_g: bool = True,
                   jacobians: bool = False):
    """Per-interval controls ``nu_k`` of a path, shape ``(n, d)``.

    With ``jacobians=True`` also returns ``A_k = d nu_k / d phi_k`` and
    ``B_k = d nu_k / d phi_{k+1}``, each of shape ``(n, d, d)``.
    """
    times = np.asarray(times, dtype=float)
    phi = np.asarray(states, dtype=float)
    y = np.asarray(y, dtype=float)
    dt = np.diff(times)
    n, d = len(dt), phi.shape[-1]
    if model.is_linear:
        m, r = _linear_coeffs(model, times, with_g)
        mid = 0.5 * (phi[1:] + phi[:-1])
        nu = (phi[1:] - phi[:-1]) / dt[:, None] - m[:, None] * mid - r[:, None] * y
        if not jacobians:
            return nu
        eye = np.eye(d)
        a = (-1.0 / dt - 0.5 * m)[:, None, None] * eye
        b = (1.0 / dt - 0.5 * m)[:, None, None] * eye
        return nu, a, b

    tm = 0.5 * (times[1:] + times[:-1])
    nu = np.empty((n, d))
    a = np.empty((n, d, d)) if jacobians else None
    b = np.empty((n, d, d)) if jacobians else None
    for k in range(n):
        nu[k] = _generic_local(model, tm[k], phi[k], phi[k + 1], dt[k], y, with_g)
        if not jacobians:
            continue
        for j in range(d):
            e = np.zeros(d)
            e[j] = _FD_STEP
            a[k, :, j] = (_generic_local(model, tm[k], phi[k] + e, phi[k + 1], dt[k], y, with_g)
                          - _generic_local(model, tm[k], phi[k] - e, phi[k + 1], dt[k], y, with_g)
                          ) / (2 * _FD_STEP)
            b[k, :, j] = (_generic_local(model, tm[k], phi[k], phi[k + 1] + e, dt[k], y, with_g)
                          - _generic_local(model, tm[k], phi[k], phi[k + 1] - e, dt[k], y, with_g)
                          ) / (2 * _FD_STEP)
    if jacobians:
        return nu, a, b
    return nu


def _reintegrate(model, y, times, x0, nu, with_g):
    """Solve the midpoint scheme forward from ``x0`` under the control ``nu``."""
    dt = np.diff(times)
    n, d = nu.shape
    out = np.empty((n + 1, d))
    out[0] = x0
    if model.is_linear:
        m, r = _linear_coeffs(model, times, with_g)
        for k in range(n):
            out[k + 1] = ((1 + 0.5 * dt[k] * m[k]) * out[k]
                          + dt[k] * (r[k] * y + nu[k])) / (1 - 0.5 * dt[k] * m[k])
        return out
    tm = 0.5 * (times[1:] + times[:-1])
    for k in range(n):
        z = out[k] + dt[k] * nu[k]
        for _ in range(20):
            res = _generic_local(model, tm[k], out[k], z, dt[k], y, with_g) - nu[k]
            if np.max(np.abs(res)) < 1e-13:
                break
            jac = np.empty((d, d))
            for j in range(d):
                e = np.zeros(d)
                e[j] = _FD_STEP
                jac[:, j] = (_generic_local(model, tm[k], out[k], z + e, dt[k], y, with_g)
                             - _generic_local(model, tm[k], out[k], z - e, dt[k], y, with_g)
                             ) / (2 * _FD_STEP)
            z = z - np.linalg.solve(jac, res)
        out[k + 1] = z
    return out


def ac_threshold(n_steps: int, scale: float = 1.0) -> float:
    """Residual above which a grid path is treated as not absolutely continuous."""
    noise = np.finfo(float).eps * max(1.0, scale)
    return 10.0 * (1.0 / n_steps + math.sqrt(noise))


def recover_control(spec: BridgeSpec, path: PathSample, parameterization: str = "with_g"
                    ) -> ControlPath:
    """Feasible control of ``path`` under ``spec.model``.

    ``with_g`` uses the limit bridge ODE and needs the path pinned at
    ``spec.x`` and ``spec.y``; ``without_g`` uses the plain controlled ODE. The
    sup-norm re-integration residual is stored on the returned control.

    Raises
    ------
    SingularDiffusion
        sigma is not invertible somewhere along the path.
    NonAbsolutelyContinuous
        the controls are not finite or the residual exceeds :func:`ac_threshold`.
    """
    _check_param(parameterization)
    with_g = parameterization == "with_g"
    phi = path.states
    if with_g and not (np.allclose(phi[0], spec.x, atol=1e-9, rtol=0)
                       and np.allclose(phi[-1], spec.y, atol=1e-9, rtol=0)):
        raise ValueError("with_g recovery needs a path pinned at (x, y)")
    with np.errstate(all="ignore"):
        nu = local_controls(spec.model, spec.y, path.times, phi, with_g=with_g)
    if not np.all(np.isfinite(nu)):
        raise NonAbsolutelyContinuous("recovered control is not finite")
    with np.errstate(all="ignore"):
        back = _reintegrate(spec.model, spec.y, path.times, phi[0], nu, with_g)
    residual = float(np.max(np.abs(back - phi)))
    scale = float(np.max(np.abs(phi)))
    if not residual <= ac_threshold(path.n_steps, scale):
        raise NonAbsolutelyContinuous(f"feasibility residual {residual:.3g} above threshold")
    return ControlPath(path.times, nu, residual)


def action_value(control: ControlPath) -> float:
    """``1/2 sum_k |nu_k|^2 dt_k``."""
    return control.energy()


def kinetic_energy(path: PathSample) -> float:
    """Discrete ``1/2 int |phi'|^2 dt`` from forward differences."""
    dt = np.diff(path.times)
    inc = np.diff(path.states, axis=0)
    return 0.5 * float(np.sum(np.sum(inc * inc, axis=-1) / dt))


def closed_form_bm_rate(path: PathSample) -> float:
    """BM bridge rate ``1/2 int |phi'|^2 - 1/2 |phi_1 - phi_0|^2``."""
    r = path.states[-1] - path.states[0]
    return kinetic_energy(path) - 0.5 * float(r @ r)


def _pinned(spec, path, tol):
    return (np.max(np.abs(path.states[0] - spec.x)) <= tol
            and np.max(np.abs(path.states[-1] - spec.y)) <= tol)


def bridge_rate(spec: BridgeSpec, path: PathSample, *, tol: float = 1e-9) -> float:
    """``I_B(phi)``; ``+inf`` for unpinned or non-absolutely-continuous paths."""
    if path.states.shape[-1] != spec.model.dim or not _pinned(spec, path, tol):
        return math.inf
    try:
        return action_value(recover_control(spec, path, "with_g"))
    except NonAbsolutelyContinuous:
        return math.inf


def rate_parameterizations(spec: BridgeSpec, path: PathSample) -> dict:
    """Both control parameterizations side by side, plus the BM closed form.

    For BM ``with_g`` matches ``kinetic - |x - y|^2 / 2`` and ``without_g``
    matches ``kinetic``; the two differ by the constant the static cost absorbs.
    """
    out = {
        "with_g": action_value(recover_control(spec, path, "with_g")),
        "without_g": action_value(recover_control(spec, path, "without_g")),
        "kinetic": kinetic_energy(path),
    }
    if spec.model.kind == "bm":
        out["closed_form"] = closed_form_bm_rate(path)
    return out


@dataclass(frozen=True)
class RateReport:
    """Dynamic rate ``I_D = I_S + I_B`` of one path."""

    i_s: float
    i_b: float
    i_d: float
    control: Optional[ControlPath]
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def num(v):
            return None if not math.isfinite(v) else float(v)
        return {"i_s": num(self.i_s), "i_b": num(self.i_b), "i_d": num(self.i_d),
                "diagnostics": dict(self.diagnostics)}


def dynamic_rate(path: PathSample, ot: ExactOT, model: DiffusionModel, cost_fn=None
                 ) -> RateReport:
    """Compose the static and bridge rates at the path's endpoints.

    Raises OffSupport when the endpoints are not atoms of the marginals.
    """
    x, y = path.states[0], path.states[-1]
    i_s = max(static_rate(ot, x, y, cost_fn, strict=True), 0.0)
    spec = BridgeSpec(model, x, y)
    try:
        control = recover_control(spec, path, "with_g")
        i_b = action_value(control)
        diag = {"residual": control.residual, "absolutely_continuous": True}
    except NonAbsolutelyContinuous as exc:
        control, i_b = None, math.inf
        diag = {"residual": None, "absolutely_continuous": False, "reason": str(exc)}
    return RateReport(i_s, i_b, i_s + i_b, control, diag)


# Minimum action.

class ActionObjective:
    """Discretised ``F(phi) + I_B(phi)`` over the interior grid states.

    ``value`` and ``gradient`` take the full ``(n + 1, d)`` path; the gradient
    is returned for the interior rows ``1..n-1`` only.
    """

    def __init__(self, spec: BridgeSpec, functional: PathFunctional, times):
        self.spec = spec
        self.functional = functional
        self.times = np.asarray(times, dtype=float)
        self.dt = np.diff(self.times)

    def full(self, interior) -> np.ndarray:
        d = self.spec.model.dim
        return np.vstack([self.spec.x, np.reshape(interior, (-1, d)), self.spec.y])

    def energy(self, phi) -> float:
        nu = local_controls(self.spec.model, self.spec.y, self.times, phi)
        return 0.5 * float(np.sum(np.sum(nu * nu, axis=-1) * self.dt))

    def value(self, phi) -> float:
        return float(self.functional(self.times, phi)) + self.energy(phi)

    def gradient(self, phi) -> np.ndarray:
        nu, a, b = local_controls(self.spec.model, self.spec.y, self.times, phi, jacobians=True)
        w = self.dt[:, None] * nu
        g = np.zeros_like(phi)
        g[:-1] += np.einsum("kij,ki->kj", a, w)
        g[1:] += np.einsum("kij,ki->kj", b, w)
        g += self.functional.grad(self.times, phi)
        return g[1:-1]


class _ControlCoordinates:
    """Affine bijection between scaled controls ``w`` and interior path states.

    Uses the linear bridge recursion of BM (or of the model itself for OU), so
    that for linear models the energy is ``|w|^2 / 2`` up to the last interval.
    """

    def __init__(self, spec: BridgeSpec, times):
        model = spec.model
        theta = model.theta if model.kind == "ou" else 0.0
        ref = _RefModel(theta)
        m, r = _linear_coeffs(ref, times, True)
        dt = np.diff(times)[:-1]
        m, r = m[:-1], r[:-1]
        den = 1.0 - 0.5 * dt * m
        self.alpha = (1.0 + 0.5 * dt * m) / den
        self.beta = np.sqrt(dt) / den
        self.c = (dt * r / den)[:, None] * spec.y
        self.p = np.concatenate([[1.0], np.cumprod(self.alpha)])
        self.x = spec.x

    def to_path(self, w):
        inc = (self.c + self.beta[:, None] * w) / self.p[1:, None]
        return self.p[1:, None] * (self.x + np.cumsum(inc, axis=0))

    def from_path(self, interior):
        prev = np.vstack([self.x, interior[:-1]])
        return (interior - self.alpha[:, None] * prev - self.c) / self.beta[:, None]

    def pullback(self, v):
        s = np.cumsum((self.p[1:, None] * v)[::-1], axis=0)[::-1]
        return self.beta[:, None] / self.p[1:, None] * s


@dataclass(frozen=True)
class _RefModel:
    theta: float


@dataclass(frozen=True)
class MinimizeResult:
    """Output of :func:`minimize_action`."""

    path: PathSample
    value: float
    f_value: float
    rate: float
    control: ControlPath
    grad_norm: float
    converged: bool
    start: int
    start_values: tuple
    gradient_check: float
    n_iter: int

    def to_dict(self) -> dict:
        return {"value": self.value, "f_value": self.f_value, "rate": self.rate,
                "grad_norm": self.grad_norm, "converged": self.converged,
                "start": self.start, "start_values": list(self.start_values),
                "gradient_check": self.gradient_check, "n_iter": self.n_iter,
                "n_steps": self.path.n_steps}


def initial_paths(spec: BridgeSpec, times, seed: int = 0, n_restarts: int = 3) -> list:
    """Multistart paths: the line, the corrected forward flow, random Fourier bumps."""
    t = np.asarray(times, dtype=float)[:, None]
    line = spec.x + t * (spec.y - spec.x)
    flow = deterministic_flow(spec.model, spec.x, times)
    flow = flow + t * (spec.y - flow[-1])
    out = [line, flow]
    rng = streams.generator(seed, "multistart")
    scale = 0.25 * (1.0 + float(np.linalg.norm(spec.y - spec.x)))
    while len(out) < n_restarts:
        c = rng.normal(0.0, scale, size=(3, spec.model.dim))
        k = np.arange(1, 4)
        out.append(line + np.sin(np.pi * t * k) @ c)
    return out[:n_restarts]


def _l2_to_line(spec, times, phi):
    t = times[:, None]
    r = phi - (spec.x + t * (spec.y - spec.x))
    q = np.sum(r * r, axis=-1)
    return float(np.sum(0.5 * (q[1:] + q[:-1]) * np.diff(times)))


def _directional_check(obj, phi, seed, n_dirs=3, h=1e-5):
    """Worst relative error of directional derivatives; floors the scale at 1e-6."""
    rng = streams.generator(seed, "gradient-check")
    g = obj.gradient(phi)
    worst = 0.0
    for _ in range(n_dirs):
        u = rng.standard_normal(g.shape)
        u /= np.linalg.norm(u)
        step = np.zeros_like(phi)
        step[1:-1] = h * u
        fd = (obj.value(phi + step) - obj.value(phi - step)) / (2 * h)
        an = float(np.sum(g * u))
        worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-6))
    return worst


def minimize_action(spec: BridgeSpec, functional: Optional[PathFunctional] = None,
                    n_steps: int = 1000, *, times=None, n_restarts: int = 3, seed: int = 0,
                    gtol: float = 1e-9, max_iter: int = 5000, threads: int = 1,
                    extra_starts=()) -> MinimizeResult:
    """Minimise ``F(phi) + I_B(phi)`` over paths pinned at ``spec.x``, ``spec.y``.

    L-BFGS runs in scaled-control coordinates (a fixed linear change of
    variables that makes the BM and OU energies isotropic). The best of the
    multistarts wins; values within ``1e-9`` are broken by the L2 distance to
    the straight line, then by start index.

    Parameters
    ----------
    functional : PathFunctional, optional
        Defaults to ``F = 0``.
    times : array, optional
        Grid; defaults to ``n_steps`` uniform steps.
    extra_starts : sequence of arrays
        Additional full initial paths appended after the default starts.
    """
    functional = functional if functional is not None else Constant(params={"value": 0.0})
    times = np.linspace(0.0, 1.0, n_steps + 1) if times is None else np.asarray(times, float)
    d = spec.model.dim
    obj = ActionObjective(spec, functional, times)
    coords = _ControlCoordinates(spec, times)
    starts = initial_paths(spec, times, seed, n_restarts) + [np.asarray(s, float)
                                                            for s in extra_starts]

    def fun(wflat):
        w = wflat.reshape(-1, d)
        phi = obj.full(coords.to_path(w))
        val = obj.value(phi)
        grad = coords.pullback(obj.gradient(phi))
        return val, grad.ravel()

    def run(start):
        w0 = coords.from_path(np.asarray(start, float)[1:-1])
        res = minimize(fun, w0.ravel(), jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15,
                                "maxcor": 20, "maxls": 50})
        phi = obj.full(coords.to_path(res.x.reshape(-1, d)))
        gnorm = float(np.max(np.abs(res.jac))) if res.jac.size else 0.0
        return phi, obj.value(phi), gnorm, int(res.nit)

    results = streams.map_ordered(run, starts, threads)
    values = [r[1] for r in results]
    best = min(values)
    close = [i for i, v in enumerate(values) if v <= best + TIE_TOL]
    pick = min(close, key=lambda i: (_l2_to_line(spec, times, results[i][0]), i))
    phi, value, gnorm, nit = results[pick]
    converged = gnorm <= max(gtol, 1e-6)
    if not converged:
        warnings.warn(f"minimize_action stopped with gradient norm {gnorm:.3g}",
                      NoConvergenceWarning, stacklevel=2)
    path = PathSample(times, phi, seed, 0)
    control = recover_control(spec, path, "with_g")
    rate = action_value(control)
    f_value = float(functional(times, phi))
    check = _directional_check(obj, phi, seed)
    return MinimizeResult(path, f_value + rate, f_value, rate, control, gnorm, converged,
                          pick, tuple(values), check, nit)


__all__ = [
    "PARAMETERIZATIONS", "local_controls", "recover_control", "action_value", "kinetic_energy",
    "closed_form_bm_rate", "bridge_rate", "rate_parameterizations", "RateReport",
    "dynamic_rate", "ActionObjective", "MinimizeResult", "initial_paths", "minimize_action",
    "ac_threshold",
]
