"""
Reference diffusions, their bridges and small-noise limits.

A reference process solves

    dX_t = b(t, X_t) dt + sqrt(eta) sigma(t, X_t) dW_t

and its bridge from x (time 0) to y (time 1) adds the Doob h-transform drift
``eta sigma sigma^T grad_x log p(t, x; 1, y)``. Two families have closed forms and
are registered here: scaled Brownian motion (``kind="bm"``) and the
Ornstein-Uhlenbeck process ``dX = -theta X dt + sqrt(eta) dW`` (``kind="ou"``),
both with sigma = I. Any other model is ``kind="generic"`` and must supply its
own density callbacks.

All state arguments are arrays whose last axis has length ``dim``; leading axes
are batch axes and broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import MissingDensity, TimeAtTerminal

DEFAULT_DELTA_PIN = 1e-3
LINEAR_KINDS = ("bm", "ou")


@dataclass(frozen=True)
class DiffusionModel:
    """Small-noise reference diffusion.

    Parameters
    ----------
    drift : callable ``(t, x) -> array like x``
    diffusion : callable ``(t, x) -> (..., d, d)``
    eta : float
        Noise scale. ``eta = 0`` denotes the deterministic limit; densities are
        then unavailable but limit quantities still are.
    dim : int
    transition_log_density : callable ``(s, x, t, y) -> (...)``, optional
    transition_log_gradient_x : callable ``(s, x, t, y) -> (..., d)``, optional
    transition_log_gradient_y : callable, optional
        Gradient of the log density in the terminal variable. Finite differences
        of ``transition_log_density`` are used when absent.
    domain_radius : float
        Half-width of the box used for exit diagnostics.
    limit_bridge_drift : callable ``(t, x, y) -> array``, optional
        eta -> 0 limit of the bridge drift, for generic models.
    limit_cost_fn : callable ``(x, y) -> (...)``, optional
    family : callable ``eta -> DiffusionModel``, optional
        Lets generic models be re-scaled by :meth:`with_eta`.
    """

    drift: Callable
    diffusion: Callable
    eta: float
    dim: int
    transition_log_density: Optional[Callable] = None
    transition_log_gradient_x: Optional[Callable] = None
    transition_log_gradient_y: Optional[Callable] = None
    domain_radius: float = 10.0
    kind: str = "generic"
    theta: float = 0.0
    unit_diffusion: bool = False
    limit_bridge_drift: Optional[Callable] = field(default=None, compare=False)
    limit_cost_fn: Optional[Callable] = field(default=None, compare=False)
    family: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not self.domain_radius > 0:
            raise ValueError("domain_radius must be positive")

    @property
    def is_linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    def with_eta(self, eta: float) -> "DiffusionModel":
        """Same reference family at another noise level."""
        if self.kind == "bm":
            return brownian(eta, self.dim, self.domain_radius)
        if self.kind == "ou":
            return ornstein_uhlenbeck(self.theta, eta, self.dim, self.domain_radius)
        if self.family is not None:
            return self.family(eta)
        if eta == self.eta:
            return self
        raise MissingDensity("generic model has no `family`; cannot change eta")

    def to_dict(self) -> dict:
        if not self.is_linear:
            raise ValueError("only registered models serialize")
        out = {"kind": self.kind, "eta": self.eta, "dim": self.dim,
               "domain_radius": self.domain_radius}
        if self.kind == "ou":
            out["theta"] = self.theta
        return out


@dataclass(frozen=True)
class BridgeSpec:
    model: DiffusionModel
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        d = self.model.dim
        if x.shape != (d,) or y.shape != (d,):
            raise ValueError(f"endpoints must have shape ({d},)")
        r = self.model.domain_radius
        if np.max(np.abs(x)) > r or np.max(np.abs(y)) > r:
            raise ValueError("bridge endpoints lie outside domain_radius")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)


# Linear-Gaussian helpers shared by BM (theta = 0) and OU.

def _decay(theta, tau):
    return np.exp(-theta * tau)


def _unit_variance(theta, tau):
    """(1 - exp(-2 theta tau)) / (2 theta), equal to tau when theta = 0."""
    tau = np.asarray(tau, dtype=float)
    if theta == 0.0:
        return tau
    return -np.expm1(-2.0 * theta * tau) / (2.0 * theta)


def _linear_model(kind, theta, eta, dim, domain_radius):
    theta = float(theta)
    eta = float(eta)
    eye = np.eye(dim)

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        if theta == 0.0:
            return np.zeros_like(x)
        return -theta * x

    def diffusion(t, x):
        return eye

    density = grad_x = grad_y = None
    if eta > 0:
        def density(s, x, t, y):
            tau = t - s
            a, v = _decay(theta, tau), eta * _unit_variance(theta, tau)
            r = np.asarray(y, dtype=float) - a * np.asarray(x, dtype=float)
            return -0.5 * np.sum(r * r, axis=-1) / v - 0.5 * dim * np.log(2 * np.pi * v)

        def grad_x(s, x, t, y):
            tau = t - s
            a, v = _decay(theta, tau), eta * _unit_variance(theta, tau)
            return a * (np.asarray(y, dtype=float) - a * np.asarray(x, dtype=float)) / v

        def grad_y(s, x, t, y):
            tau = t - s
            a, v = _decay(theta, tau), eta * _unit_variance(theta, tau)
            return -(np.asarray(y, dtype=float) - a * np.asarray(x, dtype=float)) / v

    return DiffusionModel(
        drift=drift,
        diffusion=diffusion,
        eta=eta,
        dim=int(dim),
        transition_log_density=density,
        transition_log_gradient_x=grad_x,
        transition_log_gradient_y=grad_y,
        domain_radius=float(domain_radius),
        kind=kind,
        theta=theta,
        unit_diffusion=True,
    )


def brownian(eta: float, dim: int = 1, domain_radius: float = 10.0) -> DiffusionModel:
    """Scaled Brownian motion sqrt(eta) W."""
    return _linear_model("bm", 0.0, eta, dim, domain_radius)


def ornstein_uhlenbeck(theta: float, eta: float, dim: int = 1,
                       domain_radius: float = 10.0) -> DiffusionModel:
    """OU process with scalar mean reversion ``theta`` applied per coordinate."""
    if theta <= 0:
        raise ValueError("theta must be positive; use brownian() for theta = 0")
    return _linear_model("ou", theta, eta, dim, domain_radius)


def from_dict(block: dict) -> DiffusionModel:
    kind = block["kind"]
    radius = block.get("domain_radius", 10.0)
    if kind == "bm":
        return brownian(block["eta"], block.get("dim", 1), radius)
    if kind == "ou":
        return ornstein_uhlenbeck(block["theta"], block["eta"], block.get("dim", 1), radius)
    raise ValueError(f"unknown model kind {kind!r}")


def diffusion_matrix(model: DiffusionModel, t, x) -> np.ndarray:
    """sigma(t, x) broadcast to ``x.shape + (d,)``."""
    x = np.asarray(x, dtype=float)
    sig = np.asarray(model.diffusion(t, x), dtype=float)
    return np.broadcast_to(sig, x.shape + (model.dim,))


def apply_diffusion(model: DiffusionModel, t, x, v) -> np.ndarray:
    """sigma(t, x) @ v, batched over leading axes."""
    if model.unit_diffusion:
        return v
    sig = diffusion_matrix(model, t, x)
    return np.einsum("...ij,...j->...i", sig, v)


def _check_time(t):
    if t >= 1.0:
        raise TimeAtTerminal(f"bridge drift is singular at t = 1 (got t = {t})")


def _linear_bridge_drift(theta, t, x, y):
    tau = 1.0 - t
    a = _decay(theta, tau)
    return a * (np.asarray(y, dtype=float) - a * np.asarray(x, dtype=float)) / _unit_variance(theta, tau)


def h_transform_drift(spec: BridgeSpec, t: float, x, *, limit: bool = False) -> np.ndarray:
    """Doob h-transform drift ``eta sigma sigma^T grad_x log p(t, x; 1, y)``.

    For BM this is ``(y - x) / (1 - t)`` and for OU
    ``2 theta e^{-theta tau} (y - e^{-theta tau} x) / (1 - e^{-2 theta tau})`` with
    ``tau = 1 - t``; neither depends on eta. ``limit=True`` asks for the
    eta -> 0 limit, which generic models must register explicitly.
    """
    _check_time(t)
    return bridge_drift(spec.model, t, x, spec.y, limit=limit)


def bridge_drift(model: DiffusionModel, t, x, y, *, limit: bool = False) -> np.ndarray:
    """h-transform drift with a (possibly per-path) target ``y``."""
    if model.is_linear:
        return _linear_bridge_drift(model.theta, t, x, y)
    if limit or model.eta == 0:
        if model.limit_bridge_drift is None:
            raise MissingDensity("generic model has no limit_bridge_drift")
        return np.asarray(model.limit_bridge_drift(t, x, y), dtype=float)
    if model.transition_log_gradient_x is None:
        raise MissingDensity("model has no transition_log_gradient_x")
    x = np.asarray(x, dtype=float)
    grad = np.asarray(model.transition_log_gradient_x(t, x, 1.0, y), dtype=float)
    sig = diffusion_matrix(model, t, x)
    a = np.einsum("...ik,...jk->...ij", sig, sig)
    return model.eta * np.einsum("...ij,...j->...i", a, grad)


def _fd_gradient(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape)
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = h
        out[..., j] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def reversal_drift(spec: BridgeSpec, t: float, xhat) -> np.ndarray:
    """Correction drift of the time-reversed bridge started at ``y``.

    Component i equals ``eta p^{-1} sum_j d/dxhat_j [a_ij(1-t, xhat) p(0, x; 1-t, xhat)]``
    with ``a = sigma sigma^T``. For constant sigma this reduces to
    ``eta a grad_xhat log p``.
    """
    _check_time(t)
    return reversal_drift_from(spec.model, t, xhat, spec.x)


def reversal_drift_from(model: DiffusionModel, t, xhat, x) -> np.ndarray:
    s = 1.0 - t
    xhat = np.asarray(xhat, dtype=float)
    if model.is_linear:
        a = _decay(model.theta, s)
        return -(xhat - a * np.asarray(x, dtype=float)) / _unit_variance(model.theta, s)
    if model.eta == 0 or model.transition_log_density is None:
        raise MissingDensity("time reversal needs a transition density")
    if model.transition_log_gradient_y is not None:
        glog = np.asarray(model.transition_log_gradient_y(0.0, x, s, xhat), dtype=float)
    else:
        glog = _fd_gradient(lambda z: model.transition_log_density(0.0, x, s, z), xhat)
    sig = diffusion_matrix(model, s, xhat)
    amat = np.einsum("...ik,...jk->...ij", sig, sig)
    out = np.einsum("...ij,...j->...i", amat, glog)
    h = 1e-6
    for j in range(model.dim):
        e = np.zeros(model.dim)
        e[j] = h
        sp = diffusion_matrix(model, s, xhat + e)
        sm = diffusion_matrix(model, s, xhat - e)
        ap = np.einsum("...ik,...jk->...ij", sp, sp)
        am = np.einsum("...ik,...jk->...ij", sm, sm)
        out = out + (ap[..., :, j] - am[..., :, j]) / (2 * h)
    return model.eta * out


def limit_cost(model: DiffusionModel, x, y) -> np.ndarray:
    """``c(x, y) = lim_{eta -> 0} -eta log p_eta(0, x; 1, y)``.

    BM gives ``|x - y|^2 / 2``; OU gives ``theta |y - e^{-theta} x|^2 / (1 - e^{-2 theta})``.
    """
    if model.is_linear:
        a = _decay(model.theta, 1.0)
        r = np.asarray(y, dtype=float) - a * np.asarray(x, dtype=float)
        return 0.5 * np.sum(r * r, axis=-1) / _unit_variance(model.theta, 1.0)
    if model.limit_cost_fn is None:
        raise MissingDensity("no limit cost registered for generic model")
    return np.asarray(model.limit_cost_fn(x, y), dtype=float)


def finite_cost(model: DiffusionModel, x, y) -> np.ndarray:
    """``c_eta(x, y) = -eta log p_eta(0, x; 1, y)``."""
    if model.transition_log_density is None or model.eta == 0:
        raise MissingDensity("finite-eta cost needs a transition density")
    return -model.eta * np.asarray(model.transition_log_density(0.0, x, 1.0, y), dtype=float)


def deterministic_flow(model: DiffusionModel, x0, times) -> np.ndarray:
    """Solution of ``phi' = b(t, phi)`` on ``times``; RK4 for generic models."""
    x0 = np.asarray(x0, dtype=float)
    times = np.asarray(times, dtype=float)
    if model.is_linear:
        return np.exp(-model.theta * times)[:, None] * x0[None, :]
    out = np.empty((len(times), x0.shape[-1]))
    out[0] = x0
    z = x0.copy()
    for k in range(len(times) - 1):
        t, dt = times[k], times[k + 1] - times[k]
        k1 = model.drift(t, z)
        k2 = model.drift(t + dt / 2, z + dt / 2 * k1)
        k3 = model.drift(t + dt / 2, z + dt / 2 * k2)
        k4 = model.drift(t + dt, z + dt * k3)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = z
    return out


def drift_jacobian(model: DiffusionModel, t, x, y, *, with_g: bool = True) -> np.ndarray:
    """Jacobian in x of ``b + g^y`` (limit drift), shape ``x.shape + (d,)``."""
    x = np.asarray(x, dtype=float)
    d = model.dim
    if model.is_linear:
        m = -model.theta
        if with_g:
            tau = 1.0 - t
            a = _decay(model.theta, tau)
            m = m - a * a / _unit_variance(model.theta, tau)
        return np.broadcast_to(m * np.eye(d), x.shape + (d,)).copy()

    def total(z):
        out = np.asarray(model.drift(t, z), dtype=float)
        if with_g:
            out = out + bridge_drift(model, t, z, y, limit=True)
        return out

    h = 1e-6
    jac = np.empty(x.shape + (d,))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[..., :, j] = (total(x + e) - total(x - e)) / (2 * h)
    return jac


def sampled_lipschitz(spec_model: DiffusionModel, delta: float, radius: float,
                      n: int = 200, seed: int = 0) -> float:
    """Largest sampled difference quotient of the bridge drift in x.

    Samples ``t <= 1 - delta`` and x, x', y in the box ``[-radius, radius]^d``.
    """
    rng = np.random.default_rng(seed)
    d = spec_model.dim
    best = 0.0
    for _ in range(n):
        t = rng.uniform(0.0, 1.0 - delta)
        x1, x2, y = rng.uniform(-radius, radius, size=(3, d))
        g1 = bridge_drift(spec_model, t, x1, y)
        g2 = bridge_drift(spec_model, t, x2, y)
        dx = np.linalg.norm(x1 - x2)
        if dx > 0:
            best = max(best, float(np.linalg.norm(g1 - g2) / dx))
    return best


def default_domain_radius(*atom_sets) -> float:
    """Ten times the diameter of the union of the supports (at least 1)."""
    pts = np.concatenate([np.atleast_2d(np.asarray(a, dtype=float)) for a in atom_sets])
    diam = 0.0
    if len(pts) > 1:
        diff = pts[:, None, :] - pts[None, :, :]
        diam = float(np.sqrt(np.max(np.sum(diff * diff, axis=-1))))
    return max(10.0 * diam, 1.0, 2.0 * float(np.max(np.abs(pts))) if pts.size else 1.0)


__all__ = [
    "DEFAULT_DELTA_PIN", "DiffusionModel", "BridgeSpec", "brownian", "ornstein_uhlenbeck",
    "from_dict", "h_transform_drift", "bridge_drift", "reversal_drift", "reversal_drift_from",
    "limit_cost", "finite_cost", "deterministic_flow", "drift_jacobian", "diffusion_matrix",
    "apply_diffusion", "sampled_lipschitz", "default_domain_radius",
]
