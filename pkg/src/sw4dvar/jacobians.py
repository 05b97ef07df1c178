"""Sparse flow Jacobians from truncated Taylor series.

The derivative of the flow map over a short span tau around a basepoint
x is approximated by

    M = I + sum_{l=1..l_max} d(x^(l))/dx * tau^l / l!,

where x^(l) is the l-th time derivative of the state.  Because the
tendency is quadratic, both the state derivatives G_l = x^(l) and the
matrices S_l = dG_l/dx obey closed Leibniz recursions,

    G_{l+1} = L G_l + sum_j C(l,j) N(G_j, G_{l-j}),
    S_{l+1} = sum_j C(l,j) P_j S_{l-j},

with P_0 the tendency Jacobian at x and P_j the constant bilinear
derivative evaluated at G_j.  Every P_j has the one-cell stencil
footprint, so S_l stays inside graph distance l and the factors remain
sparse.

Longer spans are split into substeps; the span Jacobian is the product
of the per-substep factors, kept either assembled per observation
interval or as a chain of interval factors for a whole assimilation
window.  The inverse flow Jacobian is the same construction run at the
right endpoint with a negated span, which the chains exploit: forward
and inverse factors share one set of stored trajectory basepoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.sparse as sp

from .dynamics import BLOWUP_CAP
from .errors import DivergenceError, SparsityError

DEFAULT_L_MAX = 2


def default_substeps(span: float, dt: float) -> int:
    """Substep count giving substeps of at most half the integrator step.

    Half rather than the full dt keeps the quadratic truncation error of
    the degree-2 factors comfortably below finite-difference validation
    tolerances; callers may override for coarser, cheaper chains.
    """
    return max(1, 2 * int(np.ceil(span / dt - 1e-12)))


def _state_hash(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64)
                          .tobytes()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class SparseJacobian:
    """One sparse flow-Jacobian factor over [t_start, t_end]."""

    mat: sp.csr_matrix
    t_start: float
    t_end: float
    basepoint_hash: str = ""

    def __post_init__(self):
        if self.mat.shape[0] != self.mat.shape[1]:
            raise ValueError("Jacobian factor must be square")
        if not np.all(np.isfinite(self.mat.data)):
            raise ValueError("Jacobian factor has non-finite entries")

    @property
    def n(self) -> int:
        return self.mat.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.mat @ v

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        return self.mat.T @ v


def taylor_factor(model, x_base: np.ndarray, span: float,
                  l_max: int = DEFAULT_L_MAX) -> sp.csr_matrix:
    """Single-span Taylor Jacobian at one basepoint; span may be negative."""
    if not 1 <= l_max <= 4:
        raise ValueError("l_max must be in 1..4")
    n = model.n
    lin = model.linear_matrix()

    g = [np.asarray(x_base, dtype=np.float64), model.rhs(x_base)]
    for l in range(1, l_max):
        nxt = lin @ g[l]
        for j in range(l + 1):
            nxt = nxt + comb(l, j) * model.quad_apply(g[j], g[l - j])
        g.append(nxt)

    p = [lin + model.quad_jacobian(g[0])]
    p += [model.quad_jacobian(g[j]) for j in range(1, l_max)]

    s = [sp.identity(n, format="csr"), p[0].tocsr()]
    for l in range(1, l_max):
        nxt = p[0] @ s[l]
        for j in range(1, l + 1):
            nxt = nxt + comb(l, j) * (p[j] @ s[l - j])
        s.append(nxt.tocsr())

    fac = 1.0
    acc = s[0].astype(np.float64)
    power = 1.0
    for l in range(1, l_max + 1):
        power *= span
        fac *= l
        acc = acc + (power / fac) * s[l]
    return acc.tocsr()


def _check_band(mat: sp.csr_matrix, d: int, max_dist: int) -> None:
    """Certify that all entries stay within the stencil graph distance."""
    coo = mat.tocoo()
    dd = d * d
    rc, cc = coo.row % dd, coo.col % dd
    di = np.abs(rc // d - cc // d)
    dj = np.abs(rc % d - cc % d)
    di = np.minimum(di, d - di)
    dj = np.minimum(dj, d - dj)
    if np.any(di + dj > max_dist):
        raise SparsityError(
            f"factor entries outside certified graph distance {max_dist}; "
            "rebuild with more substeps")


def _chain_product(mats: list[sp.csr_matrix]) -> sp.csr_matrix:
    """mats[-1] @ ... @ mats[0], paired as a balanced tree to limit fill."""
    work = list(mats)
    while len(work) > 1:
        nxt = []
        for i in range(0, len(work) - 1, 2):
            nxt.append((work[i + 1] @ work[i]).tocsr())
        if len(work) % 2:
            nxt.append(work[-1])
        work = nxt
    return work[0]


def _raw_step(model, x: np.ndarray, dt: float) -> np.ndarray:
    """One Runge-Kutta step without sign or stability validation."""
    k1 = model.rhs(x)
    k2 = model.rhs(x + 0.5 * dt * k1)
    k3 = model.rhs(x + 0.5 * dt * k2)
    k4 = model.rhs(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _substep_states(model, x_from: np.ndarray, dt_sub: float,
                    count: int) -> list[np.ndarray]:
    states = [np.asarray(x_from, dtype=np.float64)]
    for _ in range(count):
        nxt = _raw_step(model, states[-1], dt_sub)
        peak = float(np.max(np.abs(nxt))) if nxt.size else 0.0
        if not np.isfinite(peak) or peak > BLOWUP_CAP:
            raise DivergenceError(
                f"basepoint magnitude {peak:.3g} exceeded the cap "
                f"{BLOWUP_CAP:.0e} while linearising")
        states.append(nxt)
    return states


def _grid_d(model) -> int | None:
    params = getattr(model, "params", None)
    return params.d if params is not None else None


def _forward_factor(model, states: list[np.ndarray], dt_sub: float,
                    l_max: int) -> sp.csr_matrix:
    d = _grid_d(model)
    mats = []
    for s in range(len(states) - 1):
        m = taylor_factor(model, states[s], dt_sub, l_max)
        if d is not None:
            _check_band(m, d, l_max)
        mats.append(m)
    return _chain_product(mats)


def _inverse_factor(model, states: list[np.ndarray], dt_sub: float,
                    l_max: int) -> sp.csr_matrix:
    d = _grid_d(model)
    mats = []
    for s in range(len(states) - 1, 0, -1):
        m = taylor_factor(model, states[s], -dt_sub, l_max)
        if d is not None:
            _check_band(m, d, l_max)
        mats.append(m)
    return _chain_product(mats)


def build_jacobian(model, x_start: np.ndarray, t_start: float, t_end: float,
                   l_max: int = DEFAULT_L_MAX,
                   substeps: int = 1) -> SparseJacobian:
    """Flow Jacobian over [t_start, t_end] linearised along the trajectory
    launched from x_start."""
    if t_end <= t_start:
        raise ValueError("t_end must exceed t_start")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    dt_sub = (t_end - t_start) / substeps
    states = _substep_states(model, x_start, dt_sub, substeps)
    mat = _forward_factor(model, states, dt_sub, l_max)
    return SparseJacobian(mat, t_start, t_end, _state_hash(x_start))


def build_inverse_jacobian(model, x_end: np.ndarray, t_start: float,
                           t_end: float, l_max: int = DEFAULT_L_MAX,
                           substeps: int = 1) -> SparseJacobian:
    """Inverse flow Jacobian over [t_start, t_end], linearised at the
    trajectory ending in x_end; basepoints come from a short backward run."""
    if t_end <= t_start:
        raise ValueError("t_end must exceed t_start")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    dt_sub = (t_end - t_start) / substeps
    back = _substep_states(model, x_end, -dt_sub, substeps)
    states = list(reversed(back))
    mat = _inverse_factor(model, states, dt_sub, l_max)
    return SparseJacobian(mat, t_start, t_end, _state_hash(x_end))


@dataclass(eq=False)
class JacobianChain:
    """Interval factors M_1..M_k of one window, plus its trajectory.

    factors[i] covers [times[i], times[i+1]]; states[i] is the trajectory
    at times[i].  Inverse factors are optional and index-aligned.
    """

    factors: list[SparseJacobian]
    times: np.ndarray
    states: np.ndarray
    inverse_factors: list[SparseJacobian] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        k = len(self.factors)
        if k == 0:
            raise ValueError("chain needs at least one factor")
        if len(self.times) != k + 1 or len(self.states) != k + 1:
            raise ValueError("chain trajectory must hold k+1 records")
        for i, fac in enumerate(self.factors):
            if not (np.isclose(fac.t_start, self.times[i])
                    and np.isclose(fac.t_end, self.times[i + 1])):
                raise ValueError("factor spans must tile the window")
        if self.inverse_factors is not None \
                and len(self.inverse_factors) != k:
            raise ValueError("inverse factors must align with factors")

    @property
    def k(self) -> int:
        return len(self.factors)

    @property
    def n(self) -> int:
        return self.factors[0].n


def build_chain(model, x0: np.ndarray, t0: float, h_obs: float, k: int,
                l_max: int = DEFAULT_L_MAX, substeps: int = 1,
                with_inverse: bool = False) -> JacobianChain:
    """Jacobian chain along the trajectory from x0 over k intervals of
    length h_obs.  One integration provides the basepoints for the forward
    and, when requested, the inverse factors."""
    if k < 1:
        raise ValueError("need at least one interval")
    dt_sub = h_obs / substeps
    states = _substep_states(model, x0, dt_sub, k * substeps)
    times = t0 + h_obs * np.arange(k + 1)

    fwd, inv = [], []
    for i in range(k):
        seg = states[i * substeps:(i + 1) * substeps + 1]
        hsh = _state_hash(seg[0])
        fwd.append(SparseJacobian(
            _forward_factor(model, seg, dt_sub, l_max),
            times[i], times[i + 1], hsh))
        if with_inverse:
            inv.append(SparseJacobian(
                _inverse_factor(model, seg, dt_sub, l_max),
                times[i], times[i + 1], _state_hash(seg[-1])))
    mainline = np.array([states[i * substeps] for i in range(k + 1)])
    return JacobianChain(fwd, times, mainline,
                         inv if with_inverse else None,
                         meta={"l_max": l_max, "substeps": substeps})


def chain_apply(chain: JacobianChain, v: np.ndarray, upto: int | None = None,
                transpose: bool = False, inverse: bool = False) -> np.ndarray:
    """Apply the product of the first `upto` interval factors to v.

    forward:             M_u ... M_1 v
    transpose:           (M_u ... M_1)^T v
    inverse:             (M_u ... M_1)^{-1} v
    inverse+transpose:   (M_u ... M_1)^{-T} v
    """
    u = chain.k if upto is None else int(upto)
    if not 0 <= u <= chain.k:
        raise ValueError(f"upto must be in 0..{chain.k}")
    out = np.asarray(v, dtype=np.float64)
    if u == 0:
        return out.copy()
    if inverse:
        if chain.inverse_factors is None:
            raise ValueError("chain was built without inverse factors")
        facs = chain.inverse_factors[:u]
        seq = facs if transpose else reversed(facs)
    else:
        facs = chain.factors[:u]
        seq = reversed(facs) if transpose else facs
    for f in seq:
        out = f.apply_transpose(out) if transpose else f.apply(out)
    return out
