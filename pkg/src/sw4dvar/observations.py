"""Pointwise observation operators and synthetic observation sets.

Three observing scenarios are supported on the d x d torus:

  1. u and v at every grid cell            (2*d*d values),
  2. h everywhere plus u and v on a coarse  (d*d + 2*ceil(d/r)^2)
     lattice of spatial frequency r,
  3. h on the coarse lattice only           (ceil(d/r)^2).

The coarse lattice takes cells {offset, offset+r, ...} along both axes.
An operator is simply the sorted list of observed state indices, so
observe is a gather, observe_transpose a scatter, and their composition
the identity on observation space.  Observation noise is white with a
single standard deviation sigma, drawn from a counter-seeded generator so
that any (seed, time index) pair reproduces bit-identical values on any
platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import Trajectory, nstate

SCENARIOS = (1, 2, 3)


def coarse_cells(d: int, r: int, offset: int = 0) -> np.ndarray:
    """Cell indices of the coarse observing lattice."""
    sites = np.arange(offset % r, d, r)
    ii, jj = np.meshgrid(sites, sites, indexing="ij")
    return (ii * d + jj).ravel()


def n_observed(scenario: int, d: int, r: int) -> int:
    m = int(np.ceil(d / r)) ** 2
    if scenario == 1:
        return 2 * d * d
    if scenario == 2:
        return d * d + 2 * m
    if scenario == 3:
        return m
    raise ValueError(f"scenario must be one of {SCENARIOS}")


@dataclass(frozen=True, eq=False)
class ObsOperator:
    """Selection of observed state components with white noise level sigma."""

    scenario: int
    d: int
    r: int
    sigma: float
    offset: int = 0
    index_list: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.scenario != 1 and not 1 <= self.r <= self.d:
            raise ValueError("spatial frequency r must be in 1..d")
        if self.sigma < 0 or not np.isfinite(self.sigma):
            raise ValueError("sigma must be finite and non-negative")
        dd = self.d * self.d
        if self.scenario == 1:
            idx = np.concatenate([np.arange(dd), dd + np.arange(dd)])
        else:
            cells = coarse_cells(self.d, self.r, self.offset)
            if self.scenario == 2:
                idx = np.concatenate([cells, dd + cells,
                                      2 * dd + np.arange(dd)])
            else:
                idx = 2 * dd + cells
        idx = np.unique(idx.astype(np.int64))
        object.__setattr__(self, "index_list", idx)

    @property
    def n_obs(self) -> int:
        return len(self.index_list)

    @property
    def n(self) -> int:
        return nstate(self.d)


def make_operator(scenario: int, d: int, r: int = 1, sigma: float = 0.0,
                  offset: int = 0) -> ObsOperator:
    return ObsOperator(scenario=scenario, d=d, r=r, sigma=sigma,
                       offset=offset)


def observe(op: ObsOperator, x: np.ndarray) -> np.ndarray:
    """Project a state onto observation space (gather)."""
    x = np.asarray(x)
    if x.shape != (op.n,):
        raise ValueError(f"state must have shape ({op.n},), got {x.shape}")
    return x[op.index_list].astype(np.float64)

def observe_transpose(op: ObsOperator, w: np.ndarray) -> np.ndarray:
    """Adjoint of observe (scatter into an otherwise zero state)."""
    w = np.asarray(w)
    if w.shape != (op.n_obs,):
        raise ValueError(
            f"observation vector must have shape ({op.n_obs},), got {w.shape}")
    out = np.zeros(op.n)
    out[op.index_list] = w
    return out


def obs_noise(op: ObsOperator, seed: int, l: int) -> np.ndarray:
    """Noise draw for observation time index l; reproducible per (seed, l)."""
    rng = np.random.default_rng((int(seed), 977, int(l)))
    return op.sigma * rng.standard_normal(op.n_obs)


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Noisy observations y[l] at strictly increasing times."""

    times: np.ndarray
    values: np.ndarray
    op: ObsOperator
    seed: int

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if times.ndim != 1 or values.ndim != 2 \
                or values.shape != (len(times), self.op.n_obs):
            raise ValueError("values must have shape (len(times), n_obs)")
        if len(times) and np.any(np.diff(times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("observation values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def k(self) -> int:
        return len(self.times)


def generate_observations(truth: Trajectory, op: ObsOperator,
                          seed: int, l0: int = 0) -> ObservationSet:
    """Observe every recorded state of a truth trajectory and add noise.

    l0 offsets the noise counter so windows cut from one long truth run
    keep globally unique draws per observation time.
    """
    values = np.empty((len(truth.times), op.n_obs))
    for l, state in enumerate(truth.states):
        values[l] = observe(op, state) + obs_noise(op, seed, l0 + l)
    return ObservationSet(times=truth.times.copy(), values=values,
                          op=op, seed=seed)
