"""Synthetic-experiment orchestration: truth, observations, windows.

A run is fully determined by (config, seed): the truth trajectory comes
from fixed sinusoidal initial fields on the torus, integrated at a
finer step than the assimilation integrator so the estimator never sees
its own discretisation; observation noise and the background
perturbation are drawn from seed-derived counter streams.  Methods are
run window by window, and estimates inside a window are reported only
once that window has been assimilated, with the final estimate being
the last window's flow pushforward.

The error metric is the relative Euclidean error of the unobserved
component only.  Metrics, solver traces and metadata land in plain CSV
and JSON files named by method and seed, and all rows are emitted in
sorted order so parallel execution cannot reorder output.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time as _time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .background import ImplicitBackground, WindowRecord
from .dynamics import ModelParams, Trajectory, integrate
from .enkf import (LocalizationSpec, en4dvar_assimilate, enkf_analysis,
                   enkf_init, enkf_forecast)
from .errors import ConfigError, Sw4dvarError
from .models import SweModel
from .observations import (ObsOperator, ObservationSet, generate_observations,
                           make_operator, obs_noise, observe)
from .storage import (write_metadata_json, write_metrics_csv, write_trace_csv,
                      write_tuning_csv)
from .var4d import (DiagonalBackground, SolverOptions, WindowProblem,
                    gauss_newton)

BG_PERTURB_STREAM = 541

METHODS = ("fdvar", "fixed4dvar", "enkf", "en4dvar")


def initial_fields(d: int, delta: float) -> np.ndarray:
    """Sinusoidal truth initial state on the d x d torus of side L = d*delta."""
    length = d * delta
    x = (np.arange(d) * delta)[:, None]
    y = (np.arange(d) * delta)[None, :]
    two_pi = 2.0 * np.pi
    u = 0.5 + 0.5 * np.sin(two_pi * (x + y) / length)
    v = 0.5 - 0.5 * np.cos(two_pi * (x - y) / length)
    h = 2.0 * np.sin(two_pi * x / length) * np.cos(two_pi * y / length)
    return np.concatenate([np.broadcast_to(u, (d, d)).ravel(),
                           np.broadcast_to(v, (d, d)).ravel(),
                           h.ravel()])


def depth_profile(d: int, delta: float) -> np.ndarray:
    """Doubly sinusoidal ocean depth between 100 m and 325 m."""
    length = d * delta
    x = (np.arange(d) * delta)[:, None]
    y = (np.arange(d) * delta)[None, :]
    two_pi = 2.0 * np.pi
    return 100.0 + 100.0 * (1.0 + 0.5 * np.sin(two_pi * x / length)) \
        * (1.0 + 0.5 * np.sin(two_pi * y / length))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one synthetic experiment depends on."""

    d: int = 11
    delta: float = 1.0e4
    f: float = 1.0e-4
    g: float = 9.81
    nu: float = 1.0e-3
    cb: float = 1.0e-5
    scenario: int = 1
    r: int = 3
    sigma: float = 1.0e-2
    offset: int = 0
    h_obs: float = 10.0
    k: int = 90
    n_windows: int = 4
    method: str = "fdvar"
    b: int = 2
    alpha: float = 0.0
    sigma_b: tuple[float, float, float] = (0.1, 0.1, 1.0)
    bg_perturbation: float = 1.0
    solver: SolverOptions = field(default_factory=SolverOptions)
    truth_dt_factor: float = 10.0
    n_members: int = 40
    loc_radius: float = 2.0e4
    rho: float = 1.05
    beta: float = 0.5
    seeds: tuple[int, ...] = (0,)
    out_dir: str | None = None
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sigma_b", tuple(float(s)
                                                  for s in self.sigma_b))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if isinstance(self.solver, dict):
            object.__setattr__(self, "solver", SolverOptions(**self.solver))
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; "
                              f"choose from {METHODS}")
        if self.scenario not in (1, 2, 3):
            raise ConfigError("scenario must be 1, 2 or 3")
        if self.d < 3:
            raise ConfigError("d must be >= 3")
        if not 1 <= self.r <= self.d:
            raise ConfigError("r must lie in [1, d]")
        if self.k < 1 or self.n_windows < 1:
            raise ConfigError("k and n_windows must be >= 1")
        if self.h_obs <= 0 or self.delta <= 0:
            raise ConfigError("h_obs and delta must be positive")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.b < 0 or self.alpha < 0:
            raise ConfigError("b and alpha must be >= 0")
        if any(s <= 0 for s in self.sigma_b):
            raise ConfigError("sigma_b entries must be positive")
        if self.truth_dt_factor < 1:
            raise ConfigError("truth_dt_factor must be >= 1")
        if self.n_members < 2:
            raise ConfigError("n_members must be >= 2")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("beta must lie in [0, 1)")
        if self.rho < 1.0:
            raise ConfigError("rho must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def model_params(self) -> ModelParams:
        return ModelParams(depth=depth_profile(self.d, self.delta).reshape(
            self.d, self.d), f=self.f, g=self.g, nu=self.nu, cb=self.cb,
            delta=self.delta)

    def operator(self) -> ObsOperator:
        return make_operator(self.scenario, self.d, r=self.r,
                             sigma=self.sigma, offset=self.offset)

    def resolved_solver(self) -> SolverOptions:
        return self.solver.resolve(self.h_obs, 3 * self.d * self.d)

    @property
    def total_time(self) -> float:
        return self.n_windows * self.k * self.h_obs


def preset_desk(method: str = "fdvar", **overrides) -> ExperimentConfig:
    """Minutes-scale configuration: d=11, four 15-minute windows of
    10-second velocity observations."""
    base = dict(d=11, scenario=1, r=3, sigma=1e-2, h_obs=10.0, k=90,
                n_windows=4, method=method, b=2,
                sigma_b=(0.1, 0.1, 1.0),
                solver=SolverOptions(dt=10.0, substeps=1),
                n_members=40, loc_radius=2.0e4, rho=1.05, beta=0.5,
                seeds=tuple(range(10)))
    base.update(overrides)
    return ExperimentConfig(**base)


def preset_paper_benchmark(method: str = "fdvar", **overrides
                           ) -> ExperimentConfig:
    """Full-size benchmark: d=21, 3-hour windows of 10-second
    observations over 24 hours.  Hours of compute; the desk preset is
    the fast analogue."""
    base = dict(d=21, scenario=2, r=3, sigma=1e-2, h_obs=10.0, k=1080,
                n_windows=8, method=method, b=2,
                sigma_b=(0.1, 0.1, 1.0),
                solver=SolverOptions(dt=10.0, substeps=1),
                seeds=(0,))
    base.update(overrides)
    return ExperimentConfig(**base)


def preset_long_sparse(method: str = "fdvar", **overrides
                       ) -> ExperimentConfig:
    """Height-only sparse variant: 60-second observations, 9-hour
    windows, 10-day horizon."""
    base = dict(d=21, scenario=3, r=3, sigma=1e-2, h_obs=60.0, k=540,
                n_windows=26, method=method, b=3,
                sigma_b=(0.1, 0.1, 1.0),
                solver=SolverOptions(dt=30.0, substeps=1, continuation=True),
                seeds=(0,))
    base.update(overrides)
    return ExperimentConfig(**base)


PRESETS = {
    "desk": preset_desk,
    "benchmark": preset_paper_benchmark,
    "benchmark-long": preset_long_sparse,
}


def relative_error(estimate: np.ndarray, truth: np.ndarray,
                   op: ObsOperator) -> float:
    """|| w_hat - w || / || w || over the unobserved component."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.ones(op.n, dtype=bool)
    mask[op.index_list] = False
    if not mask.any():
        raise ConfigError("no unobserved component under this operator")
    w = truth[mask]
    denom = float(np.linalg.norm(w))
    if denom == 0.0:
        raise ValueError("unobserved truth component vanishes")
    return float(np.linalg.norm(estimate[mask] - w) / denom)


def background_perturbation(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    """Initial background-mean offset: field-scaled Gaussian with the
    height part projected to zero total mass.

    The uniform height mode carries the conserved total mass; it is
    invisible to velocity observations, so an initial mass offset can
    never be corrected and would put the same error floor under every
    method.  Projecting it out keeps the comparison about recoverable
    structure.
    """
    d2 = cfg.d * cfg.d
    rng = np.random.default_rng((seed, BG_PERTURB_STREAM))
    draw = rng.standard_normal(3 * d2)
    su, sv, sh = cfg.sigma_b
    draw[:d2] *= su
    draw[d2:2 * d2] *= sv
    draw[2 * d2:] *= sh
    draw[2 * d2:] -= draw[2 * d2:].mean()
    return cfg.bg_perturbation * draw


@dataclass(eq=False)
class SingleRun:
    """One (config, seed, method) outcome."""

    seed: int
    method: str
    times: np.ndarray
    errors: np.ndarray
    traces: list[list[dict]]
    wall_per_window: list[float]
    final_state: np.ndarray
    final_background: object | None
    aborted_window: int | None = None

    @property
    def final_error(self) -> float:
        if self.errors.size == 0:
            return float("nan")
        return float(self.errors[-1])


@dataclass(eq=False)
class MetricSeries:
    """Per-time relative errors for every seed of a run."""

    method: str
    rows: list[dict]
    runs: dict[int, SingleRun]

    @property
    def partial(self) -> bool:
        return any(r.aborted_window is not None for r in self.runs.values())


def _truth_trajectory(cfg: ExperimentConfig, params: ModelParams
                      ) -> Trajectory:
    opts = cfg.resolved_solver()
    truth_dt = opts.dt / cfg.truth_dt_factor
    times = [l * cfg.h_obs for l in range(cfg.n_windows * cfg.k)]
    times.append(cfg.total_time)
    x0 = initial_fields(cfg.d, cfg.delta)
    return integrate(x0, params, 0.0, cfg.total_time, truth_dt,
                     record_at=times)


def _window_obs(cfg: ExperimentConfig, truth: Trajectory, op: ObsOperator,
                seed: int, window: int) -> ObservationSet:
    l0 = window * cfg.k
    times = truth.times[l0:l0 + cfg.k]
    states = truth.states[l0:l0 + cfg.k]
    return generate_observations(Trajectory(times, states), op, seed, l0=l0)


def run_single(cfg: ExperimentConfig, seed: int) -> SingleRun:
    """Run one seed of the configured method over all windows."""
    params = cfg.model_params()
    model = SweModel(params)
    op = cfg.operator()
    opts = cfg.resolved_solver()
    if opts.dt > params.dt_cap():
        raise ConfigError(
            f"solver dt {opts.dt} exceeds the gravity-wave stability "
            f"limit {params.dt_cap():.6g} for this grid")
    truth = _truth_trajectory(cfg, params)
    mean0 = truth.states[0] + background_perturbation(cfg, seed)
    d2 = cfg.d * cfg.d
    prec_diag = np.concatenate([
        np.full(d2, 1.0 / cfg.sigma_b[0] ** 2),
        np.full(d2, 1.0 / cfg.sigma_b[1] ** 2),
        np.full(d2, 1.0 / cfg.sigma_b[2] ** 2)])

    est_times: list[float] = []
    errors: list[float] = []
    traces: list[list[dict]] = []
    walls: list[float] = []
    aborted = None

    if cfg.method in ("fdvar", "fixed4dvar"):
        memory = cfg.b if cfg.method == "fdvar" else 0
        bg: object = ImplicitBackground(mean=mean0, base_precision=prec_diag,
                                        memory=memory, alpha=cfg.alpha)
        state = None
        for w in range(cfg.n_windows):
            obs = _window_obs(cfg, truth, op, seed, w)
            prob = WindowProblem(model=model, background=bg, obs=obs,
                                 options=opts, h_obs=cfg.h_obs)
            t_start = _time.perf_counter()
            try:
                result = gauss_newton(prob)
            except Sw4dvarError:
                aborted = w
                break
            walls.append(_time.perf_counter() - t_start)
            traces.append(result.trace)
            for l in range(cfg.k):
                est_times.append(float(obs.times[l]))
                errors.append(relative_error(result.chain.states[l],
                                             truth.state_at(obs.times[l]),
                                             op))
            record = WindowRecord(result.chain, op) if memory > 0 else None
            bg = bg.advance(record, result.pushforward)
            state = result.pushforward
        if aborted is None:
            est_times.append(cfg.total_time)
            errors.append(relative_error(state, truth.last, op))
        final_state = state if state is not None else mean0
        final_bg = bg

    elif cfg.method == "enkf":
        loc = LocalizationSpec(radius=cfg.loc_radius, delta=cfg.delta)
        cov_diag = 1.0 / prec_diag
        e = enkf_init(mean0, cov_diag, cfg.n_members, seed)
        t = 0.0
        t_start = _time.perf_counter()
        try:
            for l in range(cfg.n_windows * cfg.k):
                t_l = l * cfg.h_obs
                if t_l > t:
                    e = enkf_forecast(e, params, opts.dt, (t, t_l))
                    t = t_l
                y = observe(op, truth.state_at(t_l)) + obs_noise(op, seed, l)
                e = enkf_analysis(e, y, op, loc, cfg.rho)
                est_times.append(t_l)
                errors.append(relative_error(e.mean, truth.state_at(t_l), op))
            e = enkf_forecast(e, params, opts.dt, (t, cfg.total_time))
            est_times.append(cfg.total_time)
            errors.append(relative_error(e.mean, truth.last, op))
        except Sw4dvarError:
            aborted = len(est_times) // max(cfg.k, 1)
        walls.append(_time.perf_counter() - t_start)
        final_state = e.mean
        final_bg = e

    elif cfg.method == "en4dvar":
        loc = LocalizationSpec(radius=cfg.loc_radius, delta=cfg.delta)
        cov_diag = 1.0 / prec_diag
        e = enkf_init(mean0, cov_diag, cfg.n_members, seed)
        mean = mean0
        state = None
        for w in range(cfg.n_windows):
            obs = _window_obs(cfg, truth, op, seed, w)
            prob = WindowProblem(model=model,
                                 background=DiagonalBackground(mean,
                                                               prec_diag),
                                 obs=obs, options=opts, h_obs=cfg.h_obs)
            t_start = _time.perf_counter()
            try:
                result, e = en4dvar_assimilate(prob, e, cfg.beta, loc,
                                               rho=cfg.rho)
            except Sw4dvarError:
                aborted = w
                break
            walls.append(_time.perf_counter() - t_start)
            traces.append(result.trace)
            for l in range(cfg.k):
                est_times.append(float(obs.times[l]))
                errors.append(relative_error(result.chain.states[l],
                                             truth.state_at(obs.times[l]),
                                             op))
            mean = result.pushforward
            state = result.pushforward
        if aborted is None:
            est_times.append(cfg.total_time)
            errors.append(relative_error(state, truth.last, op))
        final_state = state if state is not None else mean0
        final_bg = e

    else:  # pragma: no cover - validate() already rejects
        raise ConfigError(f"unknown method {cfg.method!r}")

    return SingleRun(seed=seed, method=cfg.method,
                     times=np.array(est_times), errors=np.array(errors),
                     traces=traces, wall_per_window=walls,
                     final_state=final_state, final_background=final_bg,
                     aborted_window=aborted)


def _worker(payload: tuple[str, int]) -> SingleRun:
    cfg_json, seed = payload
    return run_single(ExperimentConfig.from_json(cfg_json), seed)


def run_experiment(cfg: ExperimentConfig) -> MetricSeries:
    """Run all seeds of the configured method; write CSV/JSON outputs
    when an output directory is set."""
    out_dir = os.environ.get("SW4DVAR_OUT", cfg.out_dir)
    try:
        threads = int(os.environ.get("SW4DVAR_THREADS", cfg.threads))
    except ValueError as exc:
        raise ConfigError(f"SW4DVAR_THREADS must be an integer: {exc}")
    seeds = cfg.seeds
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(_worker,
                                 [(cfg.to_json(), s) for s in seeds]))
    else:
        runs = [run_single(cfg, s) for s in seeds]
    by_seed = {run.seed: run for run in runs}

    rows = []
    for seed in sorted(by_seed):
        run = by_seed[seed]
        for t, err in zip(run.times, run.errors):
            rows.append({"time": float(t), "rel_error": float(err),
                         "method": cfg.method, "seed": seed})
    series = MetricSeries(method=cfg.method, rows=rows, runs=by_seed)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / f"metrics_{cfg.method}.csv", rows)
        # out_dir and threads are execution placement, not experiment
        # identity; normalise them so metadata is byte-reproducible.
        meta = {
            "config": json.loads(replace(cfg, out_dir=None,
                                         threads=1).to_json()),
            "aborted": {str(s): by_seed[s].aborted_window
                        for s in sorted(by_seed)
                        if by_seed[s].aborted_window is not None},
            "partial_results": series.partial,
            "estimate_times": len(rows) // max(len(seeds), 1),
            "enkf_variant": "perturbed-observation",
            "taper": "fifth-order piecewise rational, image-summed",
        }
        write_metadata_json(out / f"metadata_{cfg.method}.json", meta)
        # Wall times are hardware-dependent, so they live apart from the
        # reproducible outputs.
        write_metadata_json(out / f"timings_{cfg.method}.json",
                            {str(s): by_seed[s].wall_per_window
                             for s in sorted(by_seed)})
        for seed in sorted(by_seed):
            for w, trace in enumerate(by_seed[seed].traces):
                write_trace_csv(
                    out / f"trace_{cfg.method}_s{seed:04d}_w{w:02d}.csv",
                    trace)
    return series


def _apply_point(cfg: ExperimentConfig, point: dict) -> ExperimentConfig:
    """Override config fields; 'solver.name' addresses solver knobs."""
    flat = {}
    solver_over = {}
    for name, val in point.items():
        if name.startswith("solver."):
            solver_over[name.split(".", 1)[1]] = val
        else:
            flat[name] = val
    try:
        sub = replace(cfg, out_dir=None, **flat)
        if solver_over:
            sub = replace(sub, solver=replace(sub.solver, **solver_over))
    except TypeError as exc:
        raise ConfigError(f"unknown sweep parameter: {exc}") from exc
    return sub


def sweep(cfg: ExperimentConfig, grid: dict[str, list]) -> list[dict]:
    """Cross-product parameter sweep in deterministic order; one row per
    grid point with the mean final relative error over seeds."""
    names = sorted(grid)
    rows: list[dict] = []

    def points(i, acc):
        if i == len(names):
            yield dict(acc)
            return
        for val in grid[names[i]]:
            acc[names[i]] = val
            yield from points(i + 1, acc)
            del acc[names[i]]

    for point in points(0, {}):
        series = run_experiment(_apply_point(cfg, point))
        finals = [series.runs[s].final_error for s in sorted(series.runs)]
        row = dict(point)
        row["final_rel_error"] = float(np.mean(finals))
        rows.append(row)
    out_dir = os.environ.get("SW4DVAR_OUT", cfg.out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = list(names) + ["final_rel_error"]
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in rows:
                writer.writerow([repr(float(row[c]))
                                 if isinstance(row[c], float) else row[c]
                                 for c in cols])
    return rows


def tuning_sweep(cfg: ExperimentConfig, radii: list[float],
                 rhos: list[float], betas: list[float]) -> list[dict]:
    """Ensemble tuning grid (radius, rho, beta) -> final relative error."""
    rows = []
    for radius in radii:
        for rho in rhos:
            for beta in betas:
                sub = replace(cfg, loc_radius=radius, rho=rho, beta=beta,
                              out_dir=None)
                series = run_experiment(sub)
                finals = [series.runs[s].final_error
                          for s in sorted(series.runs)]
                rows.append({"radius": float(radius), "rho": float(rho),
                             "beta": float(beta),
                             "final_rel_error": float(np.mean(finals))})
    out_dir = os.environ.get("SW4DVAR_OUT", cfg.out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tuning_csv(out / "tuning.csv", rows)
    return rows
