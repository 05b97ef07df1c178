"""Compare the compiled stepping kernels against the pure-numpy fallback.

Times the full nonlinear step at a few grid sizes under each available
backend and prints per-step cost plus the speedup of the compiled path.

Usage: python3 benchmarks/bench_kernels.py [--sizes 11,21,41] [--steps 200]
"""

import argparse
import time

from sw4dvar import kernels
from sw4dvar.dynamics import ModelParams, step
from sw4dvar.harness import depth_profile, initial_fields


def per_step_seconds(d: int, steps: int, repeats: int = 3) -> float:
    delta = 1.0e4
    params = ModelParams(depth=depth_profile(d, delta).reshape(d, d),
                         f=1e-4, g=9.81, nu=1e-3, cb=1e-5, delta=delta)
    x0 = initial_fields(d, delta)
    dt = 0.1
    step(x0, params, dt)  # warm up before timing
    best = float("inf")
    for _ in range(repeats):
        x = x0.copy()
        t0 = time.perf_counter()
        for _ in range(steps):
            x = step(x, params, dt)
        best = min(best, (time.perf_counter() - t0) / steps)
    return best


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="benchmark stepping kernels across backends")
    parser.add_argument("--sizes", default="11,21,41",
                        help="comma-separated grid sizes d")
    parser.add_argument("--steps", type=int, default=200,
                        help="steps per timing sample")
    args = parser.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",") if s]

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    header = "d      n  " + "".join(f"{b:>14}" for b in backends)
    if "compiled" in backends and "numpy" in backends:
        header += "   speedup"
    print(header)

    initial = kernels.get_backend()
    try:
        for d in sizes:
            timings = {}
            for backend in backends:
                kernels.set_backend(backend)
                timings[backend] = per_step_seconds(d, args.steps)
            row = f"{d:<4}{3 * d * d:>6}  " + "".join(
                f"{1e6 * timings[b]:>12.1f}us" for b in backends)
            if "compiled" in timings and "numpy" in timings:
                row += f"{timings['numpy'] / timings['compiled']:>9.2f}x"
            print(row)
    finally:
        kernels.set_backend(initial)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
