import json
import math

import numpy as np
import pytest

from sbldp.config import ExperimentConfig
from sbldp.errors import ConfigError
from sbldp.io import dumps, file_digest, format_value, read_path_csv, sanitize, write_csv

BASE = {
    "seed": 3,
    "model": {"kind": "ou", "eta": 0.2, "theta": 1.5},
    "bridge": {"x": [0.0], "y": [1.0]},
    "functional": {"name": "midpoint-penalty", "params": {"target": 1.0}},
}


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig.from_dict(BASE)
        again = ExperimentConfig.from_dict(json.loads(cfg.canonical_json()))
        assert again.to_dict() == cfg.to_dict()
        assert again.digest() == cfg.digest()

    def test_defaults_filled(self):
        cfg = ExperimentConfig.from_dict(BASE)
        assert cfg.data["sim"]["n_steps"] == 200
        assert cfg.sim_config().seed == 3
        assert cfg.model().theta == 1.5 and cfg.model(eta=0.05).eta == 0.05
        assert cfg.bridge().y.tolist() == [1.0]

    def test_unknown_key_rejected_with_path(self):
        bad = dict(BASE, model=dict(BASE["model"], bogus=1))
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict(bad)
        assert "$.model" in str(exc.value)

    def test_wrong_type_path(self):
        bad = dict(BASE, sim={"n_steps": "many"})
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict(bad)
        assert "$.sim.n_steps" in str(exc.value)

    def test_ou_needs_theta(self):
        with pytest.raises(ConfigError, match="theta"):
            ExperimentConfig.from_dict({"model": {"kind": "ou", "eta": 0.1}})

    def test_etas_decreasing(self):
        with pytest.raises(ConfigError, match="sweep.etas"):
            ExperimentConfig.from_dict(dict(BASE, sweep={"etas": [0.1, 0.2]}))

    def test_bridge_dimension(self):
        with pytest.raises(ConfigError, match="bridge.x"):
            ExperimentConfig.from_dict(dict(BASE, bridge={"x": [0.0, 1.0], "y": [1.0]}))

    def test_unknown_functional(self):
        with pytest.raises(ConfigError, match="functional"):
            ExperimentConfig.from_dict(dict(BASE, functional={"name": "nope"}))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(str(tmp_path / "absent.json"))

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            ExperimentConfig.load(str(p))

    def test_marginal_csv_relative(self, tmp_path):
        (tmp_path / "mu.csv").write_text("x1,weight\n0.0,1\n1.0,3\n")
        raw = dict(BASE, marginals={"mu": {"csv": "mu.csv"}, "nu": {"atoms": [[0.0]]}})
        p = tmp_path / "c.json"
        p.write_text(json.dumps(raw))
        mu, nu = ExperimentConfig.load(str(p)).marginals()
        np.testing.assert_allclose(mu.weights, [0.25, 0.75])
        assert nu.weights.tolist() == [1.0]

    def test_marginal_csv_missing(self, tmp_path):
        raw = dict(BASE, marginals={"mu": {"csv": "mu.csv"}, "nu": {"atoms": [[0.0]]}})
        with pytest.raises(ConfigError, match="marginals.mu.csv"):
            ExperimentConfig.from_dict(raw, str(tmp_path))

    def test_with_seed(self):
        cfg = ExperimentConfig.from_dict(BASE).with_seed(99)
        assert cfg.seed == 99 and cfg.minimizer()["seed"] == 99
        assert ExperimentConfig.from_dict(BASE).with_seed(None).seed == 3


class TestIO:
    def test_format_value(self):
        assert format_value(0.1) == "0.1"
        assert format_value(np.float64(1 / 3)) == repr(1 / 3)
        assert format_value([1.0, 2.5]) == "1.0;2.5"
        assert format_value(True) == "true" and format_value(None) == ""
        assert format_value(np.int64(4)) == "4"

    def test_csv_bytes(self, tmp_path):
        p = tmp_path / "a.csv"
        write_csv(str(p), ["t", "x1"], [{"t": 0.0, "x1": 1 / 3}, [1.0, -2.0]])
        raw = p.read_bytes()
        assert b"\r" not in raw
        assert raw.decode() == f"t,x1\n0.0,{1 / 3!r}\n1.0,-2.0\n"

    def test_floats_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        states = rng.normal(size=(11, 2))
        times = np.linspace(0, 1, 11)
        p = tmp_path / "path.csv"
        write_csv(str(p), ["t", "x1", "x2"], [[t, *s] for t, s in zip(times, states)])
        t2, s2 = read_path_csv(str(p))
        np.testing.assert_array_equal(t2, times)
        np.testing.assert_array_equal(s2, states)

    def test_json_sanitised(self):
        out = json.loads(dumps({"b": math.inf, "a": np.arange(2), "c": np.float32(0.5)}))
        assert out == {"a": [0, 1], "b": None, "c": 0.5}
        assert sanitize((np.bool_(True),)) == [True]

    def test_digest_stable(self, tmp_path):
        p = tmp_path / "x.txt"
        p.write_bytes(b"abc")
        assert file_digest(str(p)) == (
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
