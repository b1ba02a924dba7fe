import dataclasses
import json

import pytest

from rbdsde.cli import (BasisConfig, ExperimentConfig, GridConfig, MonteCarloConfig,
                        ProblemConfig, main)


def run(args, monkeypatch, tmp_path, out="out"):
    monkeypatch.chdir(tmp_path)
    return main(args + ["--out", str(tmp_path / out)])


class TestConfig:
    def test_round_trip_defaults(self):
        cfg = ExperimentConfig()
        assert ExperimentConfig.parse(cfg.render()) == cfg

    def test_round_trip_customized(self):
        cfg = ExperimentConfig(
            problem=ProblemConfig(name="paper-1-4", overrides=(("C", 2.0), ("alpha", 0.5))),
            grid=GridConfig(T=0.75, N=40),
            monte_carlo=MonteCarloConfig(paths=1234, seed=99, b_stream=2),
            basis=BasisConfig(kind="polynomial", degree=4, bins=0),
        )
        again = ExperimentConfig.parse(cfg.render())
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()

    def test_unknown_field_rejected(self):
        with pytest.raises(Exception):
            ExperimentConfig.parse(json.dumps({"grid": {"T": 1.0, "steps": 3}}))

    def test_unknown_top_level_rejected(self):
        with pytest.raises(Exception):
            ExperimentConfig.parse(json.dumps({"grids": {}}))


class TestSolveCommand:
    def test_happy_path(self, tmp_path, monkeypatch):
        code = run(["solve", "--problem", "lipschitz-linear", "--T", "1", "--N", "20",
                    "--paths", "2000", "--seed", "7"], monkeypatch, tmp_path)
        assert code == 0
        out = tmp_path / "out"
        assert (out / "run.csv").exists()
        assert (out / "diagnostics.txt").exists()
        assert (out / "provenance.json").exists()
        header = (out / "run.csv").read_text().splitlines()[0]
        assert header == "iteration,node,t,mean_Y,mean_Z_norm,mean_K,gap,skorokhod_partial"

    def test_unknown_problem(self, tmp_path, monkeypatch):
        assert run(["solve", "--problem", "nope"], monkeypatch, tmp_path) == 2

    def test_non_convergence_still_writes(self, tmp_path, monkeypatch):
        cfg = {"problem": {"name": "paper-1-4"}, "grid": {"T": 1.0, "N": 10},
               "monte_carlo": {"paths": 500, "seed": 3},
               "solver": {"picard_max_iter": 1}}
        f = tmp_path / "cfg.json"
        f.write_text(json.dumps(cfg))
        code = run(["solve", "--config", str(f)], monkeypatch, tmp_path)
        assert code == 3
        assert (tmp_path / "out" / "run.csv").exists()

    def test_bad_json_reports_location(self, tmp_path, monkeypatch, capsys):
        f = tmp_path / "bad.json"
        f.write_text('{"grid": {bad}')
        assert run(["solve", "--config", str(f)], monkeypatch, tmp_path) == 2
        assert "line 1" in capsys.readouterr().err

    def test_expression_generators_from_config(self, tmp_path, monkeypatch):
        cfg = {"problem": {"name": "lipschitz-linear",
                           "f_expr": "0.2*y + exp(-abs(y))", "g_expr": "0"},
               "grid": {"T": 1.0, "N": 12},
               "monte_carlo": {"paths": 800, "seed": 9}}
        f = tmp_path / "cfg.json"
        f.write_text(json.dumps(cfg))
        assert run(["solve", "--config", str(f)], monkeypatch, tmp_path) == 0

    def test_flags_override_config(self, tmp_path, monkeypatch):
        cfg = {"monte_carlo": {"paths": 500, "seed": 1}, "grid": {"T": 1.0, "N": 10}}
        f = tmp_path / "cfg.json"
        f.write_text(json.dumps(cfg))
        code = run(["solve", "--config", str(f), "--problem", "lipschitz-linear",
                    "--seed", "5"], monkeypatch, tmp_path)
        assert code == 0
        prov = json.loads((tmp_path / "out" / "provenance.json").read_text())
        assert prov["seed"] == 5

    def test_byte_identical_reruns_and_thread_flag(self, tmp_path, monkeypatch):
        args = ["solve", "--problem", "lipschitz-linear", "--N", "16",
                "--paths", "1000", "--seed", "11"]
        assert run(args, monkeypatch, tmp_path, out="a") == 0
        assert run(args, monkeypatch, tmp_path, out="b") == 0
        assert run(args + ["--threads", "4"], monkeypatch, tmp_path, out="c") == 0
        a = (tmp_path / "a" / "run.csv").read_bytes()
        assert a == (tmp_path / "b" / "run.csv").read_bytes()
        assert a == (tmp_path / "c" / "run.csv").read_bytes()


class TestFieldCommand:
    def test_martingale_field_terminal(self, tmp_path, monkeypatch):
        code = run(["field", "--problem", "lipschitz-linear", "--N", "10",
                    "--paths", "400", "--seed", "2", "--x-min", "-1", "--x-max", "1",
                    "--x-points", "3", "--times", "1.0"], monkeypatch, tmp_path)
        assert code == 0
        lines = (tmp_path / "out" / "field.csv").read_text().splitlines()
        assert lines[0] == "t,x0,u"
        rows = [line.split(",") for line in lines[1:]]
        # terminal row equals the terminal map exactly
        assert [float(r[2]) for r in rows] == [-1.0, 0.0, 1.0]

    def test_z_dependent_g_status(self, tmp_path, monkeypatch):
        code = run(["field", "--problem", "paper-1-4", "--N", "8", "--paths", "200"],
                   monkeypatch, tmp_path)
        assert code == 4

    def test_determinism(self, tmp_path, monkeypatch):
        args = ["field", "--problem", "american-put-like", "--T", "0.5", "--N", "10",
                "--paths", "500", "--seed", "3", "--x-min", "90", "--x-max", "110",
                "--x-points", "3", "--times", "0.0"]
        assert run(args, monkeypatch, tmp_path, out="fa") == 0
        assert run(args, monkeypatch, tmp_path, out="fb") == 0
        assert ((tmp_path / "fa" / "field.csv").read_bytes()
                == (tmp_path / "fb" / "field.csv").read_bytes())


class TestVerifyCommand:
    def test_unknown_suite(self, tmp_path, monkeypatch):
        assert run(["verify", "nope"], monkeypatch, tmp_path) == 2

    def test_doss_suite(self, tmp_path, monkeypatch):
        assert run(["verify", "doss"], monkeypatch, tmp_path) == 0
        text = (tmp_path / "out" / "verify_doss.txt").read_text()
        assert "FAIL" not in text

    def test_condition_a_alias(self, tmp_path, monkeypatch):
        assert run(["condition-a"], monkeypatch, tmp_path) == 0
        text = (tmp_path / "out" / "verify_condition-a.txt").read_text()
        assert text.count("PASS") == 4

    def test_report_never_passes_with_failures(self, tmp_path, monkeypatch):
        # exit status 0 must coincide with a FAIL-free report
        for suite in ("doss", "condition-a"):
            code = run(["verify", suite], monkeypatch, tmp_path, out=f"v_{suite}")
            text = (tmp_path / f"v_{suite}" / f"verify_{suite}.txt").read_text()
            assert (code == 0) == ("FAIL" not in text)


class TestCompareCommand:
    def test_terminal_shift(self, tmp_path, monkeypatch):
        code = run(["compare", "--problem", "lipschitz-linear", "--N", "16",
                    "--paths", "1500", "--seed", "13", "--shift", "terminal",
                    "--amount", "1.0"], monkeypatch, tmp_path)
        assert code == 0
        assert "within_3_stderr: True" in (tmp_path / "out" / "compare.txt").read_text()


class TestEnvOverride:
    def test_rbdsde_out_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv("RBDSDE_OUT", str(tmp_path / "env_dir"))
        code = run(["solve", "--problem", "lipschitz-linear", "--N", "8",
                    "--paths", "300", "--seed", "1"], monkeypatch, tmp_path, out="flag_dir")
        assert code == 0
        assert (tmp_path / "env_dir" / "run.csv").exists()
        assert not (tmp_path / "flag_dir").exists()
