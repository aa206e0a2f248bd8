"""
Experiment configuration: one JSON document per run.

The document is validated against :data:`SCHEMA` (unknown keys are rejected),
defaults are filled in, and relative CSV paths are resolved against the config
file's directory. :meth:`ExperimentConfig.to_dict` returns the normalised form,
so parse -> serialise -> parse is the identity.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Optional

import jsonschema
import numpy as np

from .errors import ConfigError
from .eot import DiscreteMarginal
from .functionals import PathFunctional, make_functional
from .model import BridgeSpec, DiffusionModel, from_dict
from .simulate import SimConfig

_NUM = {"type": "number"}
_POINT = {"type": "array", "items": _NUM, "minItems": 1}
_POS_INT = {"type": "integer", "minimum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_MARGINAL = {
    "oneOf": [
        _obj({"atoms": {"type": "array", "items": _POINT, "minItems": 1},
              "weights": {"type": "array", "items": {"type": "number", "minimum": 0}}},
             ["atoms"]),
        _obj({"csv": {"type": "string"}}, ["csv"]),
    ]
}

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "model": _obj({
        "kind": {"enum": ["bm", "ou"]},
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "dim": _POS_INT,
        "theta": {"type": "number", "exclusiveMinimum": 0},
        "domain_radius": {"type": "number", "exclusiveMinimum": 0},
    }, ["kind", "eta"]),
    "marginals": _obj({"mu": _MARGINAL, "nu": _MARGINAL}, ["mu", "nu"]),
    "bridge": _obj({"x": _POINT, "y": _POINT,
                    "mode": {"enum": ["bridge", "forward", "reversed"]}}, ["x", "y"]),
    "sim": _obj({
        "n_steps": {"type": "integer", "minimum": 2},
        "delta_pin": {"type": ["number", "null"]},
        "scheme": {"enum": ["euler_maruyama", "exact_gaussian"]},
        "batch": _POS_INT,
        "refine_terminal": {"type": "boolean"},
    }),
    "solver": _obj({
        "method": {"enum": ["exact", "sinkhorn"]},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": _POS_INT,
        "eta_schedule": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
    }),
    "functional": _obj({"name": {"type": "string"}, "params": {"type": "object"}}, ["name"]),
    "sweep": _obj({
        "etas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                 "minItems": 1},
        "batch": _POS_INT,
        "controlled_below": {"type": "number", "minimum": 0},
        "rel_tol": {"type": "number", "exclusiveMinimum": 0},
        "pairs": {"type": "array", "items": {"type": "array", "items": _POINT,
                                             "minItems": 2, "maxItems": 2}},
    }),
    "minimize": _obj({
        "n_steps": {"type": "integer", "minimum": 2},
        "n_restarts": _POS_INT,
        "gtol": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": _POS_INT,
    }),
    "tube": _obj({
        "start": _POINT, "end": _POINT,
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "etas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                 "minItems": 1},
    }, ["start", "end", "radius"]),
    "paths": {"type": "array", "items": _obj({
        "x": _POINT, "y": _POINT,
        "amplitude": {"type": "array", "items": _NUM},
    }, ["x", "y"])},
    "validate": _obj({
        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "n_samples": _POS_INT,
        "exit_radius": {"type": ["number", "null"]},
        "etas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
    }),
    "output": _obj({
        "dir": {"type": "string"},
        "write_paths": {"type": "integer", "minimum": 0},
    }),
}, ["model"])

DEFAULTS = {
    "seed": 0,
    "sim": {"n_steps": 200, "delta_pin": None, "scheme": "euler_maruyama", "batch": 1000,
            "refine_terminal": False},
    "solver": {"method": "exact", "tol": 1e-9, "max_iter": 100000, "eta_schedule": []},
    "sweep": {"etas": [0.5, 0.2, 0.1, 0.05], "controlled_below": 0.05, "rel_tol": 0.1},
    "minimize": {"n_restarts": 3, "gtol": 1e-9, "max_iter": 5000},
    "validate": {"delta": 0.1, "radius": 2.0, "n_samples": 200, "exit_radius": None,
                 "etas": [0.5, 0.2, 0.1]},
    "output": {"dir": ".", "write_paths": 20},
}


def _json_path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read_marginal_csv(path, where):
    if not os.path.isfile(path):
        raise ConfigError(f"file not found: {path}", where)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 2:
        raise ConfigError("marginal CSV needs atom columns and a weight column", where)
    return {"atoms": data[:, :-1].tolist(), "weights": data[:, -1].tolist()}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, normalised configuration document."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str = ".") -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(exc.message, _json_path(exc.absolute_path)) from None
        data = _merge(DEFAULTS, raw)
        model = data["model"]
        model.setdefault("dim", 1)
        model.setdefault("domain_radius", 10.0)
        if model["kind"] == "ou" and "theta" not in model:
            raise ConfigError("'theta' is required for kind 'ou'", "$.model")
        if model["kind"] == "bm" and "theta" in model:
            raise ConfigError("'theta' is not allowed for kind 'bm'", "$.model.theta")
        if "marginals" in data:
            for side in ("mu", "nu"):
                block = data["marginals"][side]
                if "csv" in block:
                    where = f"$.marginals.{side}.csv"
                    data["marginals"][side] = _read_marginal_csv(
                        os.path.join(base_dir, block["csv"]), where)
        cfg = cls(data)
        cfg._check()
        return cfg

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object", "$")
        return cls.from_dict(raw, os.path.dirname(os.path.abspath(path)))

    def _check(self):
        d = self.dim
        for key in ("x", "y"):
            if "bridge" in self.data and len(self.data["bridge"][key]) != d:
                raise ConfigError(f"expected {d} coordinates", f"$.bridge.{key}")
        if "marginals" in self.data:
            for side in ("mu", "nu"):
                block = self.data["marginals"][side]
                if any(len(a) != d for a in block["atoms"]):
                    raise ConfigError(f"atoms must have {d} coordinates", f"$.marginals.{side}")
                w = block.get("weights")
                if w is not None and (len(w) != len(block["atoms"]) or sum(w) <= 0):
                    raise ConfigError("weights must match atoms and have positive mass",
                                      f"$.marginals.{side}.weights")
        etas = self.data["sweep"]["etas"]
        if any(b >= a for a, b in zip(etas, etas[1:])):
            raise ConfigError("etas must be strictly decreasing", "$.sweep.etas")
        if "functional" in self.data:
            try:
                self.functional()
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc), "$.functional") from None
        try:
            self.sim_config()
        except ValueError as exc:
            raise ConfigError(str(exc), "$.sim") from None

    # Accessors.

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        data = self.to_dict()
        data["seed"] = int(seed)
        return ExperimentConfig.from_dict(data)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def dim(self) -> int:
        return int(self.data["model"]["dim"])

    def model(self, eta: Optional[float] = None) -> DiffusionModel:
        block = dict(self.data["model"])
        if eta is not None:
            block["eta"] = eta
        return from_dict(block)

    def bridge(self, model: Optional[DiffusionModel] = None) -> BridgeSpec:
        if "bridge" not in self.data:
            raise ConfigError("missing block", "$.bridge")
        b = self.data["bridge"]
        try:
            return BridgeSpec(model or self.model(), b["x"], b["y"])
        except ValueError as exc:
            raise ConfigError(str(exc), "$.bridge") from None

    def marginals(self) -> tuple[DiscreteMarginal, DiscreteMarginal]:
        if "marginals" not in self.data:
            raise ConfigError("missing block", "$.marginals")
        out = []
        for side in ("mu", "nu"):
            block = self.data["marginals"][side]
            atoms = np.asarray(block["atoms"], dtype=float)
            w = block.get("weights")
            w = np.full(len(atoms), 1.0 / len(atoms)) if w is None else np.asarray(w, float) / sum(w)
            out.append(DiscreteMarginal(atoms, w))
        return out[0], out[1]

    def sim_config(self, **overrides) -> SimConfig:
        block = dict(self.data["sim"], seed=self.seed)
        block.update(overrides)
        return SimConfig(**block)

    def functional(self) -> PathFunctional:
        if "functional" not in self.data:
            raise ConfigError("missing block", "$.functional")
        f = self.data["functional"]
        return make_functional(f["name"], **f.get("params", {}))

    def minimizer(self) -> dict:
        m = self.data["minimize"]
        return {"n_restarts": m["n_restarts"], "gtol": m["gtol"], "max_iter": m["max_iter"],
                "seed": self.seed}

    def section(self, name: str) -> dict:
        if name not in self.data:
            raise ConfigError("missing block", f"$.{name}")
        return self.data[name]


__all__ = ["SCHEMA", "DEFAULTS", "ExperimentConfig"]
