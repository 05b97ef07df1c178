"""Experiment harness tests: config plumbing, error metric, single runs
and sweeps on a deliberately tiny problem."""

from dataclasses import replace

import numpy as np
import pytest

from sw4dvar.errors import ConfigError
from sw4dvar.harness import (
    ExperimentConfig,
    _apply_point,
    background_perturbation,
    depth_profile,
    initial_fields,
    preset_desk,
    preset_long_sparse,
    preset_paper_benchmark,
    relative_error,
    run_experiment,
    run_single,
    sweep,
)
from sw4dvar.observations import make_operator
from sw4dvar.var4d import SolverOptions


def micro_cfg(**overrides) -> ExperimentConfig:
    """Two tiny windows on a 5 x 5 grid; runs in about a second."""
    base = dict(d=5, k=2, n_windows=2, scenario=1, sigma=1e-2,
                h_obs=10.0, b=1, seeds=(0,),
                solver=SolverOptions(dt=10.0, substeps=1))
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def micro_run():
    return run_single(micro_cfg(), seed=0)


class TestFields:
    def test_initial_fields_values(self):
        x = initial_fields(4, 1e4)
        assert x.shape == (48,)
        assert x[0] == pytest.approx(0.5)        # u at (0,0)
        assert x[6] == pytest.approx(0.0, abs=1e-15)   # u at (1,2)
        assert x[16] == pytest.approx(0.0, abs=1e-15)  # v at (0,0)
        assert x[20] == pytest.approx(0.5)       # v at (1,0)
        assert x[36] == pytest.approx(2.0)       # h at (1,0)
        assert x[41] == pytest.approx(0.0, abs=1e-12)  # h at (2,1)
        assert np.all(x[:32] >= 0.0) and np.all(x[:32] <= 1.0)

    def test_depth_profile_range(self):
        depth = depth_profile(4, 1e4)
        assert depth.shape == (4, 4)
        assert depth[0, 0] == pytest.approx(200.0)
        assert depth[1, 1] == pytest.approx(325.0)
        assert depth[3, 3] == pytest.approx(125.0)
        assert depth.min() >= 125.0 - 1e-9
        assert depth.max() <= 325.0 + 1e-9


class TestConfig:
    def test_json_roundtrip(self):
        cfg = preset_desk(b=3, seeds=(4, 5))
        back = ExperimentConfig.from_json(cfg.to_json())
        assert back == cfg

    def test_from_json_rejects_garbage(self):
        with pytest.raises(ConfigError, match="valid JSON"):
            ExperimentConfig.from_json("{not json")
        with pytest.raises(ConfigError, match="unknown config fields"):
            ExperimentConfig.from_json('{"bogus": 1}')

    def test_solver_dict_promoted(self):
        cfg = ExperimentConfig.from_json(
            '{"d": 5, "solver": {"dt": 2.5, "max_outer": 3}}')
        assert isinstance(cfg.solver, SolverOptions)
        assert cfg.solver.dt == 2.5 and cfg.solver.max_outer == 3

    @pytest.mark.parametrize("field,value,match", [
        ("method", "newton", "unknown method"),
        ("scenario", 7, "scenario"),
        ("d", 2, "d must"),
        ("r", 9, "r must"),
        ("k", 0, "n_windows"),
        ("sigma", -0.1, "sigma"),
        ("b", -1, "alpha"),
        ("sigma_b", (0.1, 0.1, -1.0), "sigma_b"),
        ("truth_dt_factor", 0.5, "truth_dt_factor"),
        ("n_members", 1, "n_members"),
        ("beta", 1.0, "beta"),
        ("rho", 0.5, "rho"),
        ("seeds", (), "seed"),
        ("threads", 0, "threads"),
    ])
    def test_validation(self, field, value, match):
        with pytest.raises(ConfigError, match=match):
            replace(micro_cfg(), **{field: value})

    def test_presets_validate(self):
        for cfg in (preset_desk(), preset_paper_benchmark(),
                    preset_long_sparse(), preset_desk(method="enkf")):
            cfg.validate()
            assert cfg.operator().n_obs > 0

    def test_total_time(self):
        cfg = micro_cfg()
        assert cfg.total_time == pytest.approx(40.0)


class TestRelativeError:
    def test_known_values(self):
        op = make_operator(1, 4)
        rng = np.random.default_rng(5)
        truth = rng.standard_normal(op.n) + 2.0
        assert relative_error(truth, truth, op) == 0.0
        assert relative_error(2.0 * truth, truth, op) == pytest.approx(1.0)
        est = truth.copy()
        est[op.index_list] += 100.0
        assert relative_error(est, truth, op) == 0.0

    def test_matches_direct_formula(self):
        op = make_operator(2, 5, r=2)
        rng = np.random.default_rng(6)
        truth = rng.standard_normal(op.n) + 1.0
        est = truth + 0.1 * rng.standard_normal(op.n)
        mask = np.ones(op.n, dtype=bool)
        mask[op.index_list] = False
        want = (np.linalg.norm((est - truth)[mask])
                / np.linalg.norm(truth[mask]))
        assert relative_error(est, truth, op) == pytest.approx(want,
                                                               rel=1e-14)

    def test_fully_observed_rejected(self):
        op = make_operator(2, 4, r=1)
        x = np.ones(op.n)
        with pytest.raises(ConfigError, match="unobserved"):
            relative_error(x, x, op)


class TestPerturbation:
    def test_height_block_mass_free(self):
        cfg = micro_cfg(sigma_b=(0.1, 0.2, 1.5))
        pert = background_perturbation(cfg, seed=3)
        d2 = cfg.d * cfg.d
        assert abs(pert[2 * d2:].mean()) < 1e-15
        assert pert.shape == (3 * d2,)

    def test_scaling_and_determinism(self):
        cfg = micro_cfg()
        a = background_perturbation(cfg, seed=1)
        b = background_perturbation(cfg, seed=1)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, background_perturbation(cfg, seed=2))
        doubled = background_perturbation(
            replace(cfg, bg_perturbation=2.0), seed=1)
        np.testing.assert_allclose(doubled, 2.0 * a, rtol=0, atol=0)
        zero = background_perturbation(
            replace(cfg, bg_perturbation=0.0), seed=1)
        np.testing.assert_array_equal(zero, np.zeros_like(a))


class TestRunSingle:
    def test_estimate_times_and_count(self, micro_run):
        cfg = micro_cfg()
        want_times = [0.0, 10.0, 20.0, 30.0, 40.0]
        np.testing.assert_allclose(micro_run.times, want_times)
        assert micro_run.errors.shape == (cfg.n_windows * cfg.k + 1,)
        assert np.all(np.isfinite(micro_run.errors))
        assert micro_run.aborted_window is None
        assert len(micro_run.traces) == cfg.n_windows
        assert micro_run.final_error == micro_run.errors[-1]

    def test_memoryless_equals_interval_constant_method(self):
        a = run_single(micro_cfg(method="fdvar", b=0), seed=0)
        b = run_single(micro_cfg(method="fixed4dvar"), seed=0)
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.errors, b.errors)
        assert a.traces == b.traces
        np.testing.assert_array_equal(a.final_state, b.final_state)

    def test_exact_data_recovers_truth(self):
        cfg = micro_cfg(sigma=0.0, bg_perturbation=0.0,
                        truth_dt_factor=1.0)
        run = run_single(cfg, seed=0)
        assert np.all(run.errors < 1e-8)

    def test_cfl_violation_is_config_error(self):
        cfg = micro_cfg(solver=SolverOptions(dt=1e4, substeps=1),
                        h_obs=1e4, truth_dt_factor=1.0)
        with pytest.raises(ConfigError, match="stability"):
            run_single(cfg, seed=0)


class TestRunExperiment:
    def test_outputs_reproducible(self, tmp_path):
        cfg = micro_cfg()
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        series_a = run_experiment(replace(cfg, out_dir=str(dir_a)))
        series_b = run_experiment(replace(cfg, out_dir=str(dir_b)))
        assert not series_a.partial
        for name in ("metrics_fdvar.csv", "metadata_fdvar.json",
                     "trace_fdvar_s0000_w00.csv",
                     "trace_fdvar_s0000_w01.csv"):
            assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()
        assert (dir_a / "timings_fdvar.json").exists()
        assert len(series_a.rows) == len(cfg.seeds) * 5
        finals_a = [series_a.runs[s].final_error for s in cfg.seeds]
        finals_b = [series_b.runs[s].final_error for s in cfg.seeds]
        assert finals_a == finals_b


class TestSweep:
    def test_dotted_solver_override(self):
        cfg = micro_cfg()
        sub = _apply_point(cfg, {"b": 3, "solver.pcg_tol": 0.5})
        assert sub.b == 3
        assert sub.solver.pcg_tol == 0.5
        assert sub.solver.dt == cfg.solver.dt
        assert sub.out_dir is None

    def test_unknown_parameter_rejected(self):
        with pytest.raises(ConfigError, match="unknown sweep parameter"):
            _apply_point(micro_cfg(), {"bogus": 1})

    def test_grid_rows_match_individual_runs(self, tmp_path):
        cfg = micro_cfg(k=1, n_windows=1, out_dir=str(tmp_path))
        rows = sweep(cfg, {"b": [0, 1]})
        assert [row["b"] for row in rows] == [0, 1]
        direct = run_experiment(replace(cfg, b=0, out_dir=None))
        want = direct.runs[0].final_error
        assert rows[0]["final_rel_error"] == want
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "b,final_rel_error"
        assert len(lines) == 3
