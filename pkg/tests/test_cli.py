import json

import pytest

from scl.cli import REPRODUCE_IDS, RunConfig, main
from scl.errors import ConfigError
from scl.forward import PathBundle

SMALL = ["--paths", "400", "--steps", "32"]


def _run(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    return rc, out.out, out.err


def _write_config(path, **doc):
    path.write_text(json.dumps(doc))
    return str(path)


class TestConfig:
    def test_floors_and_ladders(self):
        with pytest.raises(ConfigError, match="floor"):
            RunConfig.from_dict({"paths": 10})
        with pytest.raises(ConfigError, match="floor"):
            RunConfig.from_dict({"steps": 8})
        with pytest.raises(ConfigError, match="decreasing"):
            RunConfig.from_dict({"eps_ladder": [0.1, 0.2]})
        with pytest.raises(ConfigError, match="unknown configuration keys"):
            RunConfig.from_dict({"pathz": 1000})

    def test_echo_round_trip(self):
        cfg = RunConfig.from_dict({"problem": "example34", "control": [0.0, 0.5], "form": "malliavin"})
        assert RunConfig.from_dict(cfg.echo()).echo() == cfg.echo()

    def test_problem_file_relative_to_config(self, tmp_path, capsys):
        (tmp_path / "prob.json").write_text(json.dumps({"kind": "example33"}))
        cfg = _write_config(tmp_path / "run.json", problem="prob.json", out=str(tmp_path / "o"))
        rc, out, _ = _run(capsys, "validate", "--config", cfg)
        assert rc == 0 and "passed" in out


class TestExitCodes:
    def test_paths_below_floor(self, capsys, tmp_path):
        rc, _, err = _run(capsys, "check", "--preset", "example33", "--paths", "10", "--out", str(tmp_path))
        assert rc == 2 and "configuration error" in err

    def test_inadmissible_reference(self, capsys, tmp_path):
        cfg = _write_config(tmp_path / "c.json", problem="example33", control=[2.0])
        rc, _, err = _run(capsys, "simulate", "--config", cfg, *SMALL, "--out", str(tmp_path))
        assert rc == 2 and "outside the control set" in err

    def test_unknown_reproduce_id(self, capsys, tmp_path):
        rc, _, err = _run(capsys, "reproduce", "example99", "--out", str(tmp_path))
        assert rc == 2 and "example33" in err

    def test_numerical_failure(self, capsys, tmp_path):
        problem = {"kind": "custom-expr", "n": 1, "m": 1, "T": 1.0, "x0": [1.0], "b": ["100*x[0]**2"],
                   "sigma": ["0*u[0]"], "f": "0", "h": "0",
                   "control_set": {"kind": "box", "lower": [-1], "upper": [1]}}
        cfg = _write_config(tmp_path / "c.json", problem=problem)
        rc, _, err = _run(capsys, "simulate", "--config", cfg, *SMALL, "--out", str(tmp_path))
        assert rc == 3 and "numerical failure" in err

    def test_deterministic_plugins_need_constant_kernels(self, capsys, tmp_path):
        cfg = _write_config(tmp_path / "c.json", problem="sine-drift", control=[0.2], plugins="deterministic",
                            form="malliavin", tau_grid=[0.0], v_grid=[[1.0]])
        rc, _, err = _run(capsys, "check", "--config", cfg, *SMALL, "--out", str(tmp_path))
        assert rc == 2 and "path-constant" in err


class TestCommands:
    def test_simulate_writes_bundle(self, capsys, tmp_path):
        rc, out, _ = _run(capsys, "simulate", "--preset", "example33", *SMALL, "--out", str(tmp_path))
        assert rc == 0 and out.startswith("J = ")
        b = PathBundle.load(tmp_path / "bundle.sclb")
        assert b.dW.shape == (400, 32)
        doc = json.loads((tmp_path / "simulate.json").read_text())
        assert doc["config_echo"]["paths"] == 400 and doc["command"] == "simulate"

    def test_adjoint_csv(self, capsys, tmp_path):
        rc, _, _ = _run(capsys, "adjoint", "--preset", "lq-scalar", *SMALL, "--out", str(tmp_path))
        header = (tmp_path / "adjoint.csv").read_text().splitlines()[0]
        assert rc == 0 and header.startswith("t,P1_0_mean")

    @pytest.mark.parametrize("preset, verdict", [("example33", "violated"), ("example34", "satisfied")])
    def test_check_verdicts(self, capsys, tmp_path, preset, verdict):
        rc, out, _ = _run(capsys, "check", "--preset", preset, *SMALL, "--out", str(tmp_path))
        assert rc == 0 and f"martingale: {verdict}" in out
        doc = json.loads((tmp_path / "condition-martingale.json").read_text())
        assert doc["global_verdict"] == verdict
        assert doc["config_echo"]["problem"] == preset
        assert (tmp_path / "dplus-traces-martingale.csv").exists()

    def test_malliavin_form_with_zero_plugins(self, capsys, tmp_path):
        cfg = _write_config(tmp_path / "c.json", problem="example33", form="malliavin", plugins="deterministic")
        rc, out, _ = _run(capsys, "check", "--config", cfg, *SMALL, "--out", str(tmp_path))
        assert rc == 0 and "malliavin: violated" in out
        cells = json.loads((tmp_path / "condition-malliavin.json").read_text())["cells"]
        assert {c["value"] for c in cells if c["v"] == [1.0]} == {1.0}

    def test_not_singular_reference(self, capsys, tmp_path):
        rc, out, _ = _run(capsys, "check", "--preset", "lq-scalar", *SMALL, "--form", "integral",
                          "--out", str(tmp_path))
        assert rc == 0 and "singularity: not singular" in out and "integral: not applicable" in out

    def test_first_order_only(self, capsys, tmp_path):
        rc, out, _ = _run(capsys, "check", "--preset", "example34", *SMALL, "--order", "1", "--out", str(tmp_path))
        assert rc == 0 and not list(tmp_path.glob("condition-martingale.json"))
        assert (tmp_path / "condition-first-order.json").exists()

    def test_reports_are_byte_identical(self, capsys, tmp_path):
        out = str(tmp_path / "run")
        files = {}
        for attempt in range(2):
            assert _run(capsys, "check", "--preset", "example33", *SMALL, "--out", out)[0] == 0
            files[attempt] = {p.name: p.read_bytes() for p in (tmp_path / "run").iterdir()
                              if p.name != "timings.json"}
        assert files[0] == files[1] and len(files[0]) >= 4
        stages = json.loads((tmp_path / "run" / "timings.json").read_text())
        assert {"simulate", "adjoint"} <= set(stages)


class TestReproduce:
    @pytest.mark.parametrize("example_id", ["lq-riccati", "counterexample-osc", "counterexample-singular",
                                            "example34"])
    def test_fast_ids_pass(self, capsys, tmp_path, example_id):
        rc, out, _ = _run(capsys, "reproduce", example_id, *SMALL, "--out", str(tmp_path))
        lines = out.strip().splitlines()
        assert rc == 0 and lines and all(line.startswith(f"[PASS] {example_id}: ") for line in lines)
        doc = json.loads((tmp_path / f"{example_id}.json").read_text())
        assert doc["ok"] is True

    def test_ids_are_listed(self):
        assert len(REPRODUCE_IDS) == len(set(REPRODUCE_IDS)) == 7
