"""
Bounded path functionals used as Laplace test functions and action penalties.

A functional maps a path on a time grid to a real number. Values are computed
for stacks of paths ``(..., n + 1, d)``; ``grad`` returns the derivative with
respect to every grid state of a single path. All registry entries saturate at a
declared ``bound`` so that Laplace functionals stay finite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _target(times, target, slope):
    return np.asarray(target, dtype=float) + np.multiply.outer(times, np.asarray(slope, dtype=float))


def _interp_weights(times, t):
    k = int(np.searchsorted(times, t))
    if k < len(times) and abs(times[k] - t) < 1e-12:
        return [(k, 1.0)]
    k0 = max(k - 1, 0)
    k1 = min(k, len(times) - 1)
    w = (t - times[k0]) / (times[k1] - times[k0])
    return [(k0, 1.0 - w), (k1, w)]


def _trapezoid_weights(times):
    dt = np.diff(times)
    w = np.zeros(len(times))
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


@dataclass(frozen=True)
class PathFunctional:
    name: str
    params: dict = field(default_factory=dict)

    @property
    def bound(self) -> float:
        return math.inf

    def __call__(self, times, states):
        raise NotImplementedError

    def grad(self, times, state):
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class Constant(PathFunctional):
    name: str = "constant"

    @property
    def bound(self):
        return abs(float(self.params.get("value", 0.0)))

    def __call__(self, times, states):
        states = np.asarray(states)
        return np.full(states.shape[:-2], float(self.params.get("value", 0.0)))

    def grad(self, times, state):
        return np.zeros_like(np.asarray(state, dtype=float))


@dataclass(frozen=True)
class _Saturated(PathFunctional):
    """``weight/2 * min(cap, q(path))`` for a nonnegative raw quantity q."""

    @property
    def cap(self):
        return float(self.params.get("cap", 4.0))

    @property
    def weight(self):
        return float(self.params.get("weight", 1.0))

    @property
    def bound(self):
        return 0.5 * self.weight * self.cap

    def raw(self, times, states):
        raise NotImplementedError

    def raw_grad(self, times, state):
        raise NotImplementedError

    def __call__(self, times, states):
        q = self.raw(np.asarray(times, dtype=float), np.asarray(states, dtype=float))
        return 0.5 * self.weight * np.minimum(self.cap, q)

    def grad(self, times, state):
        times = np.asarray(times, dtype=float)
        state = np.asarray(state, dtype=float)
        if self.raw(times, state) >= self.cap:
            return np.zeros_like(state)
        return 0.5 * self.weight * self.raw_grad(times, state)

    def _offset(self, times, states):
        a = _target(times, self.params.get("target", 0.0), self.params.get("slope", 0.0))
        if a.ndim == 1:
            a = a[:, None]
        return states - a


@dataclass(frozen=True)
class TimePenalty(_Saturated):
    """Squared distance of ``phi(t*)`` to a target; ``t* = 1`` or ``1/2`` by default."""

    name: str = "midpoint-penalty"

    @property
    def time(self):
        default = 1.0 if self.name == "terminal-penalty" else 0.5
        return float(self.params.get("time", default))

    def _point(self, times, states):
        return sum(w * states[..., k, :] for k, w in _interp_weights(times, self.time))

    def raw(self, times, states):
        a = np.asarray(self.params.get("target", 0.0), dtype=float)
        r = self._point(times, states) - a
        return np.sum(r * r, axis=-1)

    def raw_grad(self, times, state):
        a = np.asarray(self.params.get("target", 0.0), dtype=float)
        r = self._point(times, state) - a
        g = np.zeros_like(state)
        for k, w in _interp_weights(times, self.time):
            g[k] += 2.0 * w * r
        return g


@dataclass(frozen=True)
class IntegralPenalty(_Saturated):
    """Trapezoidal ``int_0^1 |phi_t - a(t)|^2 dt`` with ``a(t) = target + slope t``."""

    name: str = "integral-penalty"

    def raw(self, times, states):
        r = self._offset(times, states)
        return np.sum(_trapezoid_weights(times) * np.sum(r * r, axis=-1), axis=-1)

    def raw_grad(self, times, state):
        r = self._offset(times, state)
        return 2.0 * _trapezoid_weights(times)[:, None] * r


@dataclass(frozen=True)
class SoftSupPenalty(_Saturated):
    """Smoothed ``sup_t |phi_t - a(t)|^2``: ``tau log sum_k w_k exp(q_k / tau)``.

    ``w`` are normalised trapezoid weights and ``tau`` the temperature.
    """

    name: str = "sup-norm-soft"

    @property
    def tau(self):
        return float(self.params.get("temperature", 0.05))

    def _parts(self, times, states):
        r = self._offset(times, states)
        q = np.sum(r * r, axis=-1)
        w = _trapezoid_weights(times)
        w = w / w.sum()
        z = q / self.tau + np.log(w)
        zmax = np.max(z, axis=-1, keepdims=True)
        e = np.exp(z - zmax)
        s = e.sum(axis=-1, keepdims=True)
        val = self.tau * (np.log(s) + zmax)[..., 0]
        return r, e / s, val

    def raw(self, times, states):
        return self._parts(times, states)[2]

    def raw_grad(self, times, state):
        r, soft, _ = self._parts(times, state)
        return 2.0 * soft[:, None] * r


@dataclass(frozen=True)
class TubePenalty(PathFunctional):
    """``weight sum_k dt_k (|phi_k - c_k| - r)_+^2``: soft tube constraint (unbounded)."""

    name: str = "tube-penalty"

    def _center(self, times):
        return np.asarray(self.params["center"], dtype=float)

    def _excess(self, times, states):
        c = self._center(times)
        r = states - c
        dist = np.linalg.norm(r, axis=-1)
        return r, dist, np.maximum(dist - float(self.params["radius"]), 0.0)

    def violation(self, times, states):
        return np.max(self._excess(np.asarray(times), np.asarray(states, dtype=float))[2], axis=-1)

    def __call__(self, times, states):
        times = np.asarray(times, dtype=float)
        _, _, ex = self._excess(times, np.asarray(states, dtype=float))
        w = _trapezoid_weights(times)
        return float(self.params.get("weight", 1.0)) * np.sum(w * ex * ex, axis=-1)

    def grad(self, times, state):
        times = np.asarray(times, dtype=float)
        r, dist, ex = self._excess(times, np.asarray(state, dtype=float))
        w = _trapezoid_weights(times)
        scale = np.where(dist > 0, 2.0 * w * ex / np.where(dist > 0, dist, 1.0), 0.0)
        return float(self.params.get("weight", 1.0)) * scale[:, None] * r


@dataclass(frozen=True)
class Sum(PathFunctional):
    """Pointwise sum of two functionals."""

    name: str = "sum"
    parts: tuple = ()

    @property
    def bound(self):
        return sum(p.bound for p in self.parts)

    def __call__(self, times, states):
        return sum(p(times, states) for p in self.parts)

    def grad(self, times, state):
        return sum(p.grad(times, state) for p in self.parts)


REGISTRY = {
    "constant": Constant,
    "terminal-penalty": TimePenalty,
    "midpoint-penalty": TimePenalty,
    "integral-penalty": IntegralPenalty,
    "sup-norm-soft": SoftSupPenalty,
}


def make_functional(name: str, **params) -> PathFunctional:
    """Build a registry functional by name."""
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown functional {name!r}; known: {sorted(REGISTRY)}") from None
    if not math.isfinite(float(params.get("cap", 4.0))) and name != "constant":
        raise ValueError("registry functionals must be bounded (finite cap)")
    return cls(name=name, params=dict(params))


def unbounded_penalty(name: str, **params) -> PathFunctional:
    """Same shapes as the registry but without saturation; for optimisation only."""
    params = dict(params, cap=math.inf)
    return REGISTRY[name](name=name, params=params)
