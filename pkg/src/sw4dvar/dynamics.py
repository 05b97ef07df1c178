"""Shallow-water dynamics on a doubly periodic square grid.

The model state holds three fields on a d-by-d torus: the velocity
components u and v and the surface elevation h measured from the rest
level.  The bottom profile enters through a static depth field, so the
local water column is h + depth.  States are flattened to vectors of
length n = 3*d*d in the fixed order u-block, v-block, h-block, each block
row-major with the first grid axis pointing in x.

Spatial derivatives are second-order centred differences with periodic
wrap-around, which makes the total water volume an exact linear invariant
of the semi-discrete system: summing the h tendency over the grid cancels
term by term.  Runge-Kutta steps preserve linear invariants, so the mass
drift of `step` is floating-point rounding only.  The discrete energy
(kinetic plus potential) is conserved by the spatial scheme when both the
viscosity and the bottom friction vanish, and strictly dissipated by the
friction term otherwise.

Time stepping is the classical fourth-order Runge-Kutta method with a
fixed substep.  Steps are refused above a gravity-wave stability limit of
0.2 * delta / sqrt(g * max depth), and any state component exceeding 1e8
in magnitude aborts the run as a divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DivergenceError

BLOWUP_CAP = 1.0e8
CFL_SAFETY = 0.2
SNAP_TOL = 1.0e-9


def nstate(d: int) -> int:
    return 3 * d * d


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Static model coefficients.

    depth is the bottom profile in metres (d x d, positive), f the Coriolis
    parameter, g gravity, nu the viscosity, cb the bottom friction factor
    and delta the grid spacing in metres.
    """

    depth: np.ndarray
    f: float
    g: float
    nu: float
    cb: float
    delta: float
    f_field: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        depth = np.ascontiguousarray(np.asarray(self.depth, dtype=np.float64))
        if depth.ndim != 2 or depth.shape[0] != depth.shape[1]:
            raise ValueError(f"depth must be square, got shape {depth.shape}")
        if depth.shape[0] < 3:
            raise ValueError("grid needs d >= 3 for centred differences")
        if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
            raise ValueError("depth must be finite and positive")
        for name in ("g", "nu", "cb", "delta"):
            val = getattr(self, name)
            if not np.isfinite(val):
                raise ValueError(f"{name} must be finite")
        if self.g <= 0 or self.delta <= 0:
            raise ValueError("g and delta must be positive")
        if self.nu < 0 or self.cb < 0:
            raise ValueError("nu and cb must be non-negative")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(
            self, "f_field",
            np.full_like(depth, float(self.f)))

    @classmethod
    def uniform(cls, d: int, depth: float, f: float, g: float, nu: float,
                cb: float, delta: float) -> "ModelParams":
        """Flat-bottom parameter set on a d x d grid."""
        return cls(depth=np.full((d, d), float(depth)), f=f, g=g, nu=nu,
                   cb=cb, delta=delta)

    @property
    def d(self) -> int:
        return self.depth.shape[0]

    @property
    def n(self) -> int:
        return nstate(self.d)

    def dt_cap(self) -> float:
        """Largest admissible Runge-Kutta substep for this grid."""
        wave = np.sqrt(self.g * float(self.depth.max()))
        return CFL_SAFETY * self.delta / wave


def split_fields(x: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Views of the u, v, h fields of a flattened state."""
    dd = d * d
    if x.shape != (3 * dd,):
        raise ValueError(f"state must have shape ({3 * dd},), got {x.shape}")
    return (x[:dd].reshape(d, d), x[dd:2 * dd].reshape(d, d),
            x[2 * dd:].reshape(d, d))


def join_fields(u: np.ndarray, v: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ravel(u), np.ravel(v), np.ravel(h)]).astype(
        np.float64, copy=False)


def component_name(idx: int, d: int) -> str:
    """Human-readable name of a state component, e.g. 'v[2,0]'."""
    dd = d * d
    block, cell = divmod(int(idx), dd)
    return f"{'uvh'[block]}[{cell // d},{cell % d}]"


def _require_finite(x: np.ndarray, d: int) -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        idx = int(np.argmax(bad))
        raise ValueError(f"non-finite state component {component_name(idx, d)}")


def tendency(x: np.ndarray, p: ModelParams) -> np.ndarray:
    """Time derivative of the flattened state."""
    x = np.asarray(x, dtype=np.float64)
    _require_finite(x, p.d)
    u, v, h = split_fields(np.ascontiguousarray(x), p.d)
    du, dv, dh = kernels.tendency(u, v, h, p.depth, p.f_field,
                                  p.g, p.nu, p.cb, p.delta)
    return join_fields(du, dv, dh)


def step(x: np.ndarray, p: ModelParams, dt: float) -> np.ndarray:
    """One Runge-Kutta step of length dt."""
    if not (dt > 0 and np.isfinite(dt)):
        raise ValueError(f"dt must be positive and finite, got {dt}")
    cap = p.dt_cap()
    if dt > cap:
        raise ValueError(f"dt={dt} exceeds the stability limit {cap:.6g}")
    x = np.asarray(x, dtype=np.float64)
    _require_finite(x, p.d)
    u, v, h = split_fields(np.ascontiguousarray(x), p.d)
    nu_, nv_, nh_, peak = kernels.rk4_step(u, v, h, p.depth, p.f_field,
                                           p.g, p.nu, p.cb, p.delta, dt)
    if not np.isfinite(peak) or peak > BLOWUP_CAP:
        raise DivergenceError(
            f"state magnitude {peak:.3g} exceeded the cap {BLOWUP_CAP:.0e}")
    return join_fields(nu_, nv_, nh_)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States recorded at increasing times along one model run."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.float64)
        if times.ndim != 1 or states.ndim != 2 or len(times) != len(states):
            raise ValueError("times and states must be matching 1d/2d arrays")
        if len(times) == 0:
            raise ValueError("trajectory cannot be empty")
        if np.any(np.diff(times) <= 0):
            raise ValueError("record times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def state_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > SNAP_TOL:
            raise KeyError(f"time {t} not recorded")
        return self.states[k]

    @property
    def last(self) -> np.ndarray:
        return self.states[-1]


def _substep_index(t: float, t0: float, dt: float) -> int:
    m = round((t - t0) / dt)
    if abs(t0 + m * dt - t) > SNAP_TOL:
        raise ValueError(
            f"record time {t} is off the substep grid (t0={t0}, dt={dt})")
    return int(m)


def integrate(x0: np.ndarray, p: ModelParams, t0: float, t1: float,
              dt: float, record_at=None) -> Trajectory:
    """Run the model from t0 to t1 recording the requested times.

    Every requested time must sit on the substep grid t0 + m*dt within
    1e-9 s, as must t1.  Records are returned sorted by time; by default
    only the final state is recorded.
    """
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    if record_at is None:
        record_at = [t1]
    times = sorted(float(t) for t in record_at)
    if not times:
        raise ValueError("record_at must name at least one time")
    if times[0] < t0 - SNAP_TOL or times[-1] > t1 + SNAP_TOL:
        raise ValueError("record times must lie inside [t0, t1]")
    marks = {}
    for t in times:
        marks.setdefault(_substep_index(t, t0, dt), t)
    nsteps = _substep_index(t1, t0, dt)

    x = np.array(x0, dtype=np.float64)
    _require_finite(x, p.d)
    out_t, out_x = [], []
    if 0 in marks:
        out_t.append(marks[0])
        out_x.append(x.copy())
    for m in range(1, nsteps + 1):
        x = step(x, p, dt)
        if m in marks:
            out_t.append(marks[m])
            out_x.append(x.copy())
    return Trajectory(np.array(out_t), np.array(out_x))


def total_mass(x: np.ndarray, p: ModelParams) -> float:
    """Sum of the water column h + depth over all cells."""
    _, _, h = split_fields(np.asarray(x, dtype=np.float64), p.d)
    return float(np.sum(h + p.depth))


def total_energy(x: np.ndarray, p: ModelParams) -> float:
    """Discrete kinetic plus potential energy.

    0.5 * sum((h+depth)*(u^2+v^2) + g*(h^2 - depth^2)); conserved by the
    spatial scheme for nu = cb = 0.
    """
    u, v, h = split_fields(np.asarray(x, dtype=np.float64), p.d)
    tot = h + p.depth
    return float(0.5 * np.sum(tot * (u * u + v * v)
                              + p.g * (h * h - p.depth * p.depth)))
