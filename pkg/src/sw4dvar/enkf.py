"""Localized perturbed-observation ensemble Kalman filter baselines.

The sample covariance of an N_e-member ensemble is rank-deficient and
long-range noisy, so the analysis uses the Schur product C o P with a
compactly supported taper C.  The taper is a fifth-order piecewise
rational correlation function of torus distance, applied spatially and
shared across the three field blocks; summing periodic images keeps the
circulant positive semidefinite for any radius.  Radius 0 degenerates to
strict per-coordinate localization (C = I), i.e. independent scalar
Kalman updates.

Two structural identities keep everything at observation-space size:

    (C o (a b')) v = a o C(b o v),

so the tapered covariance acts through per-member elementwise products
and one circulant convolution, and

    (C o P)[:, i] = C[:, i] o (A' A)[:, i] / (N_e - 1),

so the observed columns of the tapered covariance come from one thin
matrix product.  The n_obs x n_obs innovation system is formed from
those columns and solved iteratively per member; no n x n matrix is
ever assembled.

The hybrid background for ensemble-informed variational solves blends
(1 - beta) of a fixed diagonal covariance with beta of the tapered
ensemble covariance; its precision action, needed by the Gauss-Newton
loop, is one inner conjugate-gradient solve against that covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .dynamics import ModelParams, integrate as swe_integrate
from .errors import ConfigError
from .observations import ObsOperator, observe
from .var4d import MapResult, WindowProblem, gauss_newton, pcg_solve

INIT_STREAM = 331
ANALYSIS_STREAM = 613


def _gc_shape(z: np.ndarray) -> np.ndarray:
    """Fifth-order compactly supported correlation shape on [0, 2]."""
    z = np.abs(np.asarray(z, dtype=np.float64))
    out = np.zeros_like(z)
    near = z <= 1.0
    zn = z[near]
    out[near] = (1.0 + zn * zn * (-5.0 / 3.0
                                  + zn * (5.0 / 8.0 + zn * (0.5 - zn / 4.0))))
    far = (z > 1.0) & (z < 2.0)
    zf = z[far]
    out[far] = (4.0 - 5.0 * zf + (5.0 / 3.0) * zf ** 2 + (5.0 / 8.0) * zf ** 3
                - 0.5 * zf ** 4 + (1.0 / 12.0) * zf ** 5 - 2.0 / (3.0 * zf))
    return out


@dataclass(frozen=True)
class LocalizationSpec:
    """Spatial taper: radius and grid spacing in metres.

    taper(dist) vanishes at distances >= 2*radius and is non-increasing;
    radius 0 means localization to the coordinate itself.
    """

    radius: float
    delta: float

    def __post_init__(self):
        if self.radius < 0 or not np.isfinite(self.radius):
            raise ValueError("radius must be finite and >= 0")
        if self.delta <= 0 or not np.isfinite(self.delta):
            raise ValueError("delta must be finite and positive")

    def taper(self, dist) -> np.ndarray:
        dist = np.asarray(dist, dtype=np.float64)
        if self.radius == 0:
            return np.where(dist == 0.0, 1.0, 0.0)
        # dist/radius may overflow to inf for denormal radii; the shape
        # function is 0 there, so the ratio never needs to be finite.
        with np.errstate(over="ignore"):
            z = dist / self.radius
        return _gc_shape(z)


@lru_cache(maxsize=32)
def _taper_stamp(radius: float, delta: float, d: int) -> np.ndarray:
    """Circulant taper stamp s[i, j] = sum over periodic images of the
    taper at displacement (i, j) cells.  Image summing samples the plane
    spectrum, so the circulant eigenvalues stay >= 0 for any radius."""
    idx = np.arange(d, dtype=np.float64)
    reach = int(np.ceil(2.0 * radius / (delta * d))) if radius > 0 else 0
    stamp = np.zeros((d, d))
    loc = LocalizationSpec(radius=radius, delta=delta)
    for ki in range(-reach, reach + 1):
        for kj in range(-reach, reach + 1):
            di = (idx + ki * d)[:, None]
            dj = (idx + kj * d)[None, :]
            stamp += loc.taper(delta * np.hypot(di, dj))
    return stamp


@lru_cache(maxsize=32)
def _taper_spectrum(radius: float, delta: float, d: int) -> np.ndarray:
    lam = np.fft.fft2(_taper_stamp(radius, delta, d)).real
    if lam.min() < -1e-8:
        raise ValueError("taper circulant unexpectedly indefinite")
    return np.maximum(lam, 0.0)


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Member states (N_e, n) with a time stamp and seed lineage."""

    members: np.ndarray
    time: float = 0.0
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        members = np.asarray(self.members, dtype=np.float64)
        if members.ndim != 2 or members.shape[0] < 2:
            raise ValueError("ensemble needs at least 2 members, shape (N_e, n)")
        if not np.all(np.isfinite(members)):
            raise ValueError("ensemble members must be finite")
        object.__setattr__(self, "members", members)

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def n(self) -> int:
        return self.members.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def anomalies(self) -> np.ndarray:
        return self.members - self.mean


def enkf_init(mean: np.ndarray, cov_diag: np.ndarray, n_members: int,
              seed: int, time: float = 0.0) -> Ensemble:
    """Sample an initial ensemble from a diagonal Gaussian."""
    mean = np.asarray(mean, dtype=np.float64)
    cov_diag = np.asarray(cov_diag, dtype=np.float64)
    if cov_diag.shape != mean.shape:
        raise ValueError("cov_diag must match mean")
    if np.any(cov_diag < 0):
        raise ValueError("cov_diag must be >= 0")
    rng = np.random.default_rng((seed, INIT_STREAM))
    draws = rng.standard_normal((n_members, mean.size))
    members = mean + np.sqrt(cov_diag) * draws
    return Ensemble(members=members, time=time, seed=seed, step=0)


def enkf_forecast(e: Ensemble, params: ModelParams, dt: float,
                  t_span: tuple[float, float]) -> Ensemble:
    """Propagate every member with the nonlinear model."""
    t0, t1 = float(t_span[0]), float(t_span[1])
    out = np.empty_like(e.members)
    for m in range(e.n_members):
        out[m] = swe_integrate(e.members[m], params, t0, t1, dt).last
    return replace(e, members=out, time=t1)


def _cell_taper_columns(loc: LocalizationSpec, d: int,
                        obs_idx: np.ndarray) -> np.ndarray:
    """Columns of the state-space taper C at the observed indices, (n, n_obs)."""
    d2 = d * d
    n = 3 * d2
    if loc.radius == 0:
        cols = np.zeros((n, obs_idx.size))
        cols[obs_idx, np.arange(obs_idx.size)] = 1.0
        return cols
    stamp = _taper_stamp(loc.radius, loc.delta, d)
    cells = np.arange(d2)
    ci, cj = cells // d, cells % d
    oc = obs_idx % d2
    oi, oj = oc // d, oc % d
    block = stamp[(ci[:, None] - oi[None, :]) % d,
                  (cj[:, None] - oj[None, :]) % d]
    return np.tile(block, (3, 1))


def localized_covariance_columns(anomalies: np.ndarray,
                                 loc: LocalizationSpec,
                                 obs_idx: np.ndarray) -> np.ndarray:
    """Observed columns of the tapered sample covariance, (n, n_obs)."""
    n_e, n = anomalies.shape
    d = int(round(np.sqrt(n // 3)))
    pens = anomalies.T @ anomalies[:, obs_idx] / (n_e - 1)
    return _cell_taper_columns(loc, d, np.asarray(obs_idx)) * pens


def localized_covariance_apply(anomalies: np.ndarray, loc: LocalizationSpec,
                               v: np.ndarray) -> np.ndarray:
    """(C o P) v without forming anything of state-space size squared."""
    n_e, n = anomalies.shape
    v = np.asarray(v, dtype=np.float64)
    if loc.radius == 0:
        var = np.square(anomalies).sum(axis=0) / (n_e - 1)
        return var * v
    d = int(round(np.sqrt(n // 3)))
    lam = _taper_spectrum(loc.radius, loc.delta, d)
    out = np.zeros(n)
    for m in range(n_e):
        w = (anomalies[m] * v).reshape(3, d, d).sum(axis=0)
        conv = np.fft.ifft2(np.fft.fft2(w) * lam).real
        out += anomalies[m] * np.tile(conv.ravel(), 3)
    return out / (n_e - 1)


def enkf_analysis(e: Ensemble, y: np.ndarray, op: ObsOperator,
                  loc: LocalizationSpec, rho: float = 1.0,
                  rng: np.random.Generator | None = None) -> Ensemble:
    """Perturbed-observation analysis with tapered sample covariance.

    Anomalies are scaled by rho (>= 1) before the update; the innovation
    system is assembled at observation-space size and solved by
    conjugate gradients for each member's perturbed innovation.
    """
    if rho < 1.0:
        raise ValueError("inflation rho must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (op.n_obs,):
        raise ValueError("observation vector has the wrong length")
    if e.n != op.n:
        raise ValueError("ensemble and operator dimensions disagree")
    mean = e.mean
    anomalies = rho * (e.members - mean)
    members = mean + anomalies
    obs_idx = op.index_list
    cols = localized_covariance_columns(anomalies, loc, obs_idx)
    s_mat = cols[obs_idx, :].copy()
    s_mat[np.arange(op.n_obs), np.arange(op.n_obs)] += op.sigma ** 2
    s_mat = 0.5 * (s_mat + s_mat.T)
    if rng is None:
        rng = np.random.default_rng((e.seed, ANALYSIS_STREAM, e.step))
    noise = op.sigma * rng.standard_normal((e.n_members, op.n_obs))
    out = np.empty_like(members)
    for m in range(e.n_members):
        innovation = y + noise[m] - members[m, obs_idx]
        z, _ = pcg_solve(lambda w: s_mat @ w, innovation,
                         tol=1e-12, max_iter=4 * op.n_obs + 20)
        out[m] = members[m] + cols @ z
    return Ensemble(members=out, time=e.time, seed=e.seed, step=e.step + 1)


def hybrid_covariance_apply(base_cov_diag: np.ndarray, e: Ensemble,
                            beta: float, loc: LocalizationSpec,
                            v: np.ndarray) -> np.ndarray:
    """((1-beta) * diag(base) + beta * tapered sample covariance) v."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    base_cov_diag = np.asarray(base_cov_diag, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = (1.0 - beta) * base_cov_diag * v
    if beta > 0.0:
        out += beta * localized_covariance_apply(e.anomalies, loc, v)
    return out


@dataclass(frozen=True, eq=False)
class HybridBackground:
    """Background whose covariance blends a fixed diagonal with the
    tapered ensemble covariance; the precision action is an inner
    conjugate-gradient solve, so beta < 1 keeps it positive definite."""

    mean: np.ndarray
    base_cov_diag: np.ndarray
    anomalies: np.ndarray
    beta: float
    loc: LocalizationSpec
    inner_tol: float = 1e-10
    inner_max_iter: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1) for an invertible "
                             "hybrid covariance")
        if np.any(np.asarray(self.base_cov_diag) <= 0):
            raise ValueError("base covariance diagonal must be positive")

    def covariance_apply(self, v: np.ndarray) -> np.ndarray:
        out = (1.0 - self.beta) * np.asarray(self.base_cov_diag) * v
        if self.beta > 0.0:
            out += self.beta * localized_covariance_apply(
                self.anomalies, self.loc, v)
        return out

    def precision_apply(self, w: np.ndarray) -> np.ndarray:
        z, info = pcg_solve(self.covariance_apply,
                            np.asarray(w, dtype=np.float64),
                            tol=self.inner_tol, max_iter=self.inner_max_iter)
        return z


def en4dvar_assimilate(window: WindowProblem, ensemble: Ensemble,
                       beta: float, loc: LocalizationSpec,
                       rho: float = 1.0) -> tuple[MapResult, Ensemble]:
    """Variational window solve with the ensemble-hybrid background.

    The window's diagonal background supplies the fixed covariance part
    and the mean; the Gauss-Newton loop then runs against the hybrid
    precision.  The ensemble itself is advanced through the window by
    ordinary forecast/analysis sweeps so the next window sees an updated
    ensemble.  Returns the window result and that advanced ensemble.
    """
    bg = window.background
    if not hasattr(bg, "precision_diag"):
        raise ConfigError("hybrid solve needs a diagonal-precision "
                          "background to blend from")
    if np.any(bg.precision_diag <= 0):
        raise ConfigError("background precision diagonal must be positive")
    base_cov = 1.0 / bg.precision_diag
    hybrid = HybridBackground(mean=bg.mean, base_cov_diag=base_cov,
                              anomalies=ensemble.anomalies, beta=beta,
                              loc=loc)
    prob = WindowProblem(model=window.model, background=hybrid,
                         obs=window.obs, options=window.options,
                         h_obs=window.h_obs)
    result = gauss_newton(prob)

    opts = window.options.resolve(window.h_obs, window.model.n)
    e = ensemble
    t = window.t0
    for l in range(window.obs.k):
        t_l = float(window.obs.times[l])
        if t_l > t:
            e = _forecast_with_model(e, window.model, t, t_l, opts.dt)
            t = t_l
        e = enkf_analysis(e, window.obs.values[l], window.obs.op, loc, rho)
    if window.t_end > t:
        e = _forecast_with_model(e, window.model, t, window.t_end, opts.dt)
    return result, e


def _forecast_with_model(e: Ensemble, model, t0: float, t1: float,
                         dt: float) -> Ensemble:
    out = np.empty_like(e.members)
    for m in range(e.n_members):
        out[m] = model.integrate(e.members[m], t0, t1, dt).last
    return replace(e, members=out, time=t1)
