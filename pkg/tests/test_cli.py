"""Command-line interface tests driving main() in process."""

import json

import pytest

from sw4dvar.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from sw4dvar.harness import ExperimentConfig, preset_desk
from sw4dvar.storage import read_metrics_csv

from test_harness import micro_cfg


def write_cfg(path, cfg: ExperimentConfig) -> str:
    path.write_text(cfg.to_json())
    return str(path)


class TestPreset:
    def test_prints_parseable_config(self, capsys):
        assert main(["preset", "desk"]) == EXIT_OK
        out = capsys.readouterr().out
        cfg = ExperimentConfig.from_json(out)
        assert cfg == preset_desk()

    def test_method_override_and_out_file(self, tmp_path, capsys):
        target = tmp_path / "cfg.json"
        assert main(["preset", "desk", "--method", "enkf",
                     "--out", str(target)]) == EXIT_OK
        assert "wrote" in capsys.readouterr().out
        cfg = ExperimentConfig.from_json(target.read_text())
        assert cfg.method == "enkf"

    def test_unknown_preset_rejected(self, capsys):
        with pytest.raises(SystemExit):
            main(["preset", "nope"])


class TestRun:
    def test_micro_run_ok(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path / "cfg.json",
                             micro_cfg(k=1, n_windows=1))
        out_dir = tmp_path / "out"
        code = main(["run", "--config", cfg_path, "--out", str(out_dir),
                     "--seed", "3"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "seed 3: final relative error" in out
        assert "(ok)" in out
        assert "mean final relative error" in out
        rows = read_metrics_csv(out_dir / "metrics_fdvar.csv")
        assert {row["seed"] for row in rows} == {3}

    def test_missing_config(self, capsys):
        assert main(["run", "--config", "/no/such/file.json"]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_config_required(self, capsys):
        assert main(["run"]) == EXIT_CONFIG
        assert "--config is required" in capsys.readouterr().err

    def test_invalid_config_field(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text('{"bogus": 1}')
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG
        assert "unknown config fields" in capsys.readouterr().err

    def test_blowup_reports_partial(self, tmp_path, capsys):
        cfg = micro_cfg(k=1, n_windows=1, bg_perturbation=1e9)
        cfg_path = write_cfg(tmp_path / "cfg.json", cfg)
        assert main(["run", "--config", cfg_path]) == EXIT_NUMERICAL
        captured = capsys.readouterr()
        assert "aborted at window 0" in captured.out
        assert "partial results" in captured.err


class TestSweep:
    def test_grid_runs(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path / "cfg.json",
                             micro_cfg(k=1, n_windows=1))
        grid_path = tmp_path / "grid.json"
        grid_path.write_text(json.dumps({"b": [0, 1]}))
        code = main(["sweep", "--config", cfg_path,
                     "--grid", str(grid_path)])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "b=0" in out and "b=1" in out

    def test_bad_grid_json(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path / "cfg.json", micro_cfg())
        grid_path = tmp_path / "grid.json"
        grid_path.write_text("{broken")
        assert main(["sweep", "--config", cfg_path,
                     "--grid", str(grid_path)]) == EXIT_CONFIG
        assert "grid is not valid JSON" in capsys.readouterr().err

    def test_grid_must_map_to_lists(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path / "cfg.json", micro_cfg())
        grid_path = tmp_path / "grid.json"
        grid_path.write_text('{"b": 2}')
        assert main(["sweep", "--config", cfg_path,
                     "--grid", str(grid_path)]) == EXIT_CONFIG
        assert "non-empty lists" in capsys.readouterr().err


class TestValidate:
    def test_quick_battery_passes(self, capsys):
        assert main(["validate", "--quick"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "all checks passed" in out
        assert "FAIL" not in out
