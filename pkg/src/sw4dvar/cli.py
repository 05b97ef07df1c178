"""Command-line front end: run experiments, sweep parameters, emit
preset configs, and self-check the numerical core.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, Sw4dvarError
from .harness import PRESETS, ExperimentConfig, run_experiment, sweep
from .var4d import SolverOptions

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="experiment config JSON")
    parser.add_argument("--seed", type=int, action="append", default=None,
                        help="override config seeds (repeatable)")
    parser.add_argument("--method", choices=("fdvar", "fixed4dvar", "enkf",
                                             "en4dvar"),
                        help="override the configured method")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--threads", type=int, help="worker process count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sw4dvar",
        description="Windowed variational assimilation on a shallow-water "
                    "torus")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter grid")
    _add_common(p_sweep)
    p_sweep.add_argument("--grid", type=Path, required=True,
                         help="JSON object mapping config field to a list "
                              "of values ('solver.name' reaches solver "
                              "knobs)")

    p_preset = sub.add_parser("preset", help="print a built-in config")
    p_preset.add_argument("name", choices=sorted(PRESETS))
    p_preset.add_argument("--method", choices=("fdvar", "fixed4dvar", "enkf",
                                               "en4dvar"), default="fdvar")
    p_preset.add_argument("--out", type=Path,
                          help="write the config here instead of stdout")

    p_val = sub.add_parser("validate",
                           help="run the fast numerical self-checks")
    p_val.add_argument("--quick", action="store_true",
                       help="skip the slower end-to-end check")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    try:
        text = args.config.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    cfg = ExperimentConfig.from_json(text)
    if args.method is not None:
        cfg = replace(cfg, method=args.method)
    if args.seed is not None:
        cfg = replace(cfg, seeds=tuple(args.seed))
    if args.out is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    cfg.validate()
    return cfg


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    series = run_experiment(cfg)
    for seed in sorted(series.runs):
        run = series.runs[seed]
        status = "ok" if run.aborted_window is None \
            else f"aborted at window {run.aborted_window}"
        print(f"seed {seed}: final relative error {run.final_error:.6g} "
              f"({status})")
    finals = [series.runs[s].final_error for s in sorted(series.runs)]
    print(f"mean final relative error: {float(np.mean(finals)):.6g}")
    if series.partial:
        print("warning: partial results (at least one window aborted)",
              file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    try:
        grid = json.loads(args.grid.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read grid: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid is not valid JSON: {exc}") from exc
    if not isinstance(grid, dict) or not all(
            isinstance(v, list) and v for v in grid.values()):
        raise ConfigError("grid must map field names to non-empty lists")
    rows = sweep(cfg, grid)
    names = sorted(grid)
    for row in rows:
        point = ", ".join(f"{n}={row[n]}" for n in names)
        print(f"{point}: final relative error {row['final_rel_error']:.6g}")
    return EXIT_OK


def _cmd_preset(args) -> int:
    cfg = PRESETS[args.name](method=args.method)
    text = cfg.to_json()
    if args.out is not None:
        args.out.write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return EXIT_OK


def _check(name: str, fn) -> bool:
    try:
        fn()
    except Exception as exc:  # noqa: BLE001 - report, do not crash
        print(f"  FAIL {name}: {exc}")
        return False
    print(f"  ok   {name}")
    return True


def _cmd_validate(args) -> int:
    """Small invariant battery over every module; seconds, not minutes."""
    from . import kernels
    from .dynamics import ModelParams, integrate, total_energy, total_mass
    from .harness import initial_fields, depth_profile, run_single
    from .jacobians import build_chain, chain_apply
    from .models import SweModel
    from .observations import generate_observations, make_operator
    from .var4d import DiagonalBackground, WindowProblem, gauss_newton

    d = 5
    params = ModelParams(depth=depth_profile(d, 1e4).reshape(d, d),
                         f=1e-4, g=9.81, nu=1e-3, cb=1e-5, delta=1e4)
    x0 = initial_fields(d, 1e4)
    model = SweModel(params)
    n = model.n
    rng = np.random.default_rng(7)

    def conservation():
        traj = integrate(x0, params, 0.0, 50.0, 1.0, record_at=[50.0])
        m0, m1 = total_mass(x0, params), total_mass(traj.last, params)
        rel = abs(m1 - m0) / abs(m0)
        if rel > 1e-12:
            raise AssertionError(f"mass drift {rel:.2e}")
        lossless = ModelParams(depth=params.depth, f=params.f, g=params.g,
                               nu=0.0, cb=0.0, delta=params.delta)
        traj = integrate(x0, lossless, 0.0, 10.0, 0.1, record_at=[10.0])
        e0 = total_energy(x0, lossless)
        e1 = total_energy(traj.last, lossless)
        rel = abs(e1 - e0) / abs(e0)
        if rel > 1e-6:
            raise AssertionError(f"energy drift {rel:.2e}")

    def adjoint():
        chain = build_chain(model, x0, 0.0, 10.0, 2, substeps=2)
        v, w = rng.standard_normal(n), rng.standard_normal(n)
        lhs = float(w @ chain_apply(chain, v))
        rhs = float(v @ chain_apply(chain, w, transpose=True))
        rel = abs(lhs - rhs) / max(abs(lhs), 1.0)
        if rel > 1e-13:
            raise AssertionError(f"adjoint mismatch {rel:.2e}")

    def jacobian_fd():
        from .jacobians import default_substeps
        chain = build_chain(model, x0, 0.0, 10.0, 1,
                            substeps=default_substeps(10.0, 1.0))
        v = rng.standard_normal(n)
        eps = 1e-5
        plus = integrate(x0 + eps * v, params, 0.0, 10.0, 1.0).last
        minus = integrate(x0 - eps * v, params, 0.0, 10.0, 1.0).last
        fd = (plus - minus) / (2 * eps)
        err = np.linalg.norm(chain_apply(chain, v) - fd) / np.linalg.norm(fd)
        if err > 1e-5:
            raise AssertionError(f"jacobian vs fd {err:.2e}")

    def gradient_fd():
        from .var4d import _cost_terms, _gradient_from_chain, \
            _window_trajectory
        op = make_operator(1, d, sigma=1e-2)
        traj = integrate(x0, params, 0.0, 40.0, 1.0,
                         record_at=[0.0, 10.0, 20.0, 30.0])
        obs = generate_observations(traj, op, seed=3)
        bg = DiagonalBackground(x0 + 0.01 * rng.standard_normal(n),
                                np.full(n, 4.0))
        prob = WindowProblem(model=model, background=bg, obs=obs,
                             options=SolverOptions(dt=10.0, substeps=2),
                             h_obs=10.0)
        opts = prob.options.resolve(10.0, n)
        xa = np.array(bg.mean)
        states = _window_trajectory(xa, prob, opts)
        chain = build_chain(model, xa, 0.0, 10.0, prob.obs.k - 1,
                            opts.l_max, opts.substeps)
        g = _gradient_from_chain(xa, states, chain, prob)
        v = rng.standard_normal(n)
        eps = 1e-6

        def cost(x):
            return _cost_terms(x, _window_trajectory(x, prob, opts), prob)
        fd = (cost(xa + eps * v) - cost(xa - eps * v)) / (2 * eps)
        rel = abs(float(g @ v) - fd) / max(abs(fd), 1.0)
        if rel > 1e-5:
            raise AssertionError(f"gradient vs fd {rel:.2e}")

    def end_to_end():
        from .harness import preset_desk
        cfg = replace(preset_desk(), d=5, k=5, n_windows=2, seeds=(0,))
        run = run_single(cfg, 0)
        if run.aborted_window is not None:
            raise AssertionError("desk-scale run aborted")
        if not np.all(np.isfinite(run.errors)):
            raise AssertionError("non-finite errors")

    checks = [
        ("backend: " + kernels.get_backend(), lambda: None),
        ("mass and energy conservation", conservation),
        ("transport adjoint identity", adjoint),
        ("jacobian vs finite differences", jacobian_fd),
        ("window gradient vs finite differences", gradient_fd),
    ]
    if not args.quick:
        checks.append(("two-window end-to-end run", end_to_end))

    print("validation:")
    ok = all([_check(name, fn) for name, fn in checks])
    print("all checks passed" if ok else "validation FAILED")
    return EXIT_OK if ok else EXIT_NUMERICAL


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "preset":
            return _cmd_preset(args)
        if args.command == "validate":
            return _cmd_validate(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Sw4dvarError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
