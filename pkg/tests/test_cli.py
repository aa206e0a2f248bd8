import json
import os
import subprocess
import sys

import pytest

from sbldp.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, build_parser, main
from sbldp.io import file_digest

COMMANDS = ["simulate", "sinkhorn", "rate", "minimize", "laplace-sweep", "uniform-scan",
            "ldp-check", "run-dynamic-sb", "validate"]

CONFIG = {
    "seed": 7,
    "model": {"kind": "bm", "eta": 0.1},
    "marginals": {"mu": {"atoms": [[0.0]]}, "nu": {"atoms": [[-1.0], [1.0]]}},
    "bridge": {"x": [0.0], "y": [1.0]},
    "sim": {"n_steps": 50, "batch": 500},
    "solver": {"method": "sinkhorn", "eta_schedule": [0.5, 0.1]},
    "functional": {"name": "midpoint-penalty", "params": {"target": 1.0}},
    "sweep": {"etas": [0.5, 0.1], "batch": 500, "pairs": [[[0.0], [1.0]], [[0.0], [0.0]]]},
    "tube": {"start": [0.0], "end": [1.0], "radius": 0.5, "etas": [0.5, 0.1]},
    "paths": [{"x": [0.0], "y": [1.0], "amplitude": [0.1]}],
    "validate": {"exit_radius": 2.0, "n_samples": 50},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(CONFIG))
    return str(p)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("command", COMMANDS)
def test_subcommand_succeeds(command, config, tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, stdout, _ = run([command, "--config", config, "--out-dir", str(out_dir)], capsys)
    assert code == EXIT_OK
    json.loads(stdout)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["command"] == command
    assert manifest["seed"] == 7
    for name, digest in manifest["files"].items():
        assert file_digest(str(out_dir / name)) == digest


def test_help_lists_columns(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["simulate", "--help"])
    assert "path_id,step,t,x1..xd" in capsys.readouterr().out


def test_config_error_exit(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"model": {"kind": "bm", "eta": 0.1, "bogus": 1}}))
    code, _, err = run(["simulate", "--config", str(p), "--out-dir", str(tmp_path)], capsys)
    assert code == EXIT_CONFIG
    assert "$.model" in err


def test_missing_config_exit(tmp_path, capsys):
    code, _, _ = run(["simulate", "--config", str(tmp_path / "none.json")], capsys)
    assert code == EXIT_CONFIG


def test_bad_threads(config, tmp_path, capsys):
    code, _, _ = run(["simulate", "--config", config, "--threads", "0",
                      "--out-dir", str(tmp_path)], capsys)
    assert code == EXIT_CONFIG


def test_numerical_failure_exit(config, tmp_path, capsys):
    # a path ending off the support of nu cannot be given a dynamic rate
    path = tmp_path / "path.csv"
    path.write_text("t,x1\n0.0,0.0\n0.5,0.25\n1.0,0.5\n")
    code, _, err = run(["rate", "--config", config, "--path", str(path),
                        "--out", str(tmp_path / "r.json")], capsys)
    assert code == EXIT_NUMERICAL
    assert "OffSupport" in err


def test_rate_path_file(config, tmp_path, capsys):
    path = tmp_path / "path.csv"
    path.write_text("t,x1\n" + "".join(f"{k / 10!r},{k / 10!r}\n" for k in range(11)))
    out = tmp_path / "r.json"
    code, _, _ = run(["rate", "--config", config, "--path", str(path), "--out", str(out)],
                     capsys)
    assert code == EXIT_OK
    report = json.loads(out.read_text())["reports"][0]
    assert report["bridge_rate"] == pytest.approx(0.0, abs=1e-12)
    assert report["dynamic"]["i_d"] == pytest.approx(0.0, abs=1e-12)


def test_seed_override(config, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(["simulate", "--config", config, "--out-dir", str(a), "--seed", "1"], capsys)
    run(["simulate", "--config", config, "--out-dir", str(b), "--seed", "2"], capsys)
    assert (a / "paths.csv").read_bytes() != (b / "paths.csv").read_bytes()
    assert json.loads((a / "manifest.json").read_text())["seed"] == 1


@pytest.mark.parametrize("command", ["run-dynamic-sb", "laplace-sweep"])
def test_bytes_independent_of_threads(command, config, tmp_path, capsys):
    digests = []
    for threads in (1, 4, 8):
        out = tmp_path / f"t{threads}"
        assert run([command, "--config", config, "--out-dir", str(out),
                    "--threads", str(threads)], capsys)[0] == EXIT_OK
        digests.append({f: file_digest(str(out / f)) for f in sorted(os.listdir(out))})
    assert digests[0] == digests[1] == digests[2]


def test_console_script(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sbldp.cli", "minimize", "--config", config,
                           "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["converged"] is True
