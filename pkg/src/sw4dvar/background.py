"""Flow-propagated background precision with bounded window memory.

After each assimilated window the analysis precision at the window end
is, to Gauss-Newton accuracy, the transported prior precision plus the
transported observation information,

    P_end = T^{-T} (P_start + D) T^{-1},

with T the full-window Jacobian product at the optimum and D the sum of
M(t_l)' H' R^{-1} H M(t_l) over the window's observation times.  Chaining
this over the b most recent windows and closing the recursion with the
fixed diagonal precision gives the background precision for the next
window:

    B^{-1} w  =  T_{-1}^{-T} ( ... T_{-b}^{-T} ( B0^{-1}/(1+alpha) + D_{-b} )
                 T_{-b}^{-1} ... + D_{-1} ) T_{-1}^{-1} w.

Nothing is densified: each level costs one inverse-chain sweep, one
observation-information sweep and one transposed inverse sweep, all in
terms of the stored sparse interval factors.  The inflation factor
1 + alpha scales only the recursion base; with no records the precision
is exactly the diagonal B0^{-1}.

The precision is applied matrix-free, which is all conjugate-gradient
solvers need; covariance columns, when wanted for diagnostics, are
recovered by solving B^{-1} z = e_j iteratively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .jacobians import JacobianChain, chain_apply
from .observations import ObsOperator
from .var4d import observation_information_apply, pcg_solve


@dataclass(frozen=True, eq=False)
class WindowRecord:
    """Linearisation of one assimilated window kept for transport.

    chain must carry inverse factors; op identifies what was observed in
    that window and with what noise level.
    """

    chain: JacobianChain
    op: ObsOperator

    def __post_init__(self):
        if self.chain.inverse_factors is None:
            raise ValueError("window record needs inverse interval factors")

    @property
    def k(self) -> int:
        return len(self.chain.factors)

    @property
    def n(self) -> int:
        return self.chain.factors[0].mat.shape[0]

    def transport_inverse(self, v: np.ndarray) -> np.ndarray:
        """T^{-1} v, pulling a vector back across the window."""
        return chain_apply(self.chain, v, inverse=True)

    def transport_inverse_transpose(self, v: np.ndarray) -> np.ndarray:
        """T^{-T} v."""
        return chain_apply(self.chain, v, inverse=True, transpose=True)

    def information_apply(self, v: np.ndarray) -> np.ndarray:
        """D v, the window's accumulated observation information."""
        return observation_information_apply(self.chain, self.op,
                                             self.op.sigma, v, self.k)


@dataclass(frozen=True, eq=False)
class ImplicitBackground:
    """Background mean plus matrix-free flow-dependent precision.

    records holds at most `memory` window records, oldest first; advance
    returns a new instance, so backgrounds can be snapshotted freely.
    """

    mean: np.ndarray
    base_precision: np.ndarray
    memory: int
    alpha: float = 0.0
    records: tuple[WindowRecord, ...] = ()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        base = np.asarray(self.base_precision, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != base.shape:
            raise ValueError("mean and base_precision must be matching 1d")
        if np.any(base < 0) or not np.all(np.isfinite(base)):
            raise ValueError("base precision must be finite, >= 0")
        if self.memory < 0:
            raise ValueError("memory must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if len(self.records) > self.memory:
            raise ValueError("more records than the memory bound")
        for rec in self.records:
            if rec.n != mean.size:
                raise ValueError("record dimension mismatch")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "base_precision", base)
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def n(self) -> int:
        return self.mean.size

    @property
    def p(self) -> int:
        return len(self.records)

    def precision_apply(self, w: np.ndarray) -> np.ndarray:
        """B^{-1} w through the transported-information recursion."""
        w = np.asarray(w, dtype=np.float64)
        p = self.p
        if p == 0:
            return self.base_precision * w
        # Pull w back across the recorded windows, newest first;
        # pulled[j-1] is the vector transported j windows back.
        pulled = []
        z = w
        for rec in reversed(self.records):
            z = rec.transport_inverse(z)
            pulled.append(z)
        base = self.base_precision / (1.0 + self.alpha)
        q = base * pulled[p - 1] + self.records[0].information_apply(
            pulled[p - 1])
        for j in range(p - 1, 0, -1):
            q = self.records[p - j - 1].transport_inverse_transpose(q)
            q += self.records[p - j].information_apply(pulled[j - 1])
        return self.records[p - 1].transport_inverse_transpose(q)

    def advance(self, record: WindowRecord | None,
                new_mean: np.ndarray) -> "ImplicitBackground":
        """Window rollover: append the record (evicting beyond memory)
        and move the mean to the next window start."""
        new_mean = np.asarray(new_mean, dtype=np.float64)
        if new_mean.shape != self.mean.shape:
            raise ValueError("new mean has the wrong dimension")
        recs = self.records
        if record is not None and self.memory > 0:
            if record.n != self.n:
                raise ValueError("record dimension mismatch")
            recs = (recs + (record,))[-self.memory:]
        return ImplicitBackground(mean=new_mean,
                                  base_precision=self.base_precision,
                                  memory=self.memory, alpha=self.alpha,
                                  records=recs)


def _wrapped_offsets(d: int) -> np.ndarray:
    idx = np.arange(d)
    return np.minimum(idx, d - idx)


def correlation_profile(background: ImplicitBackground,
                        probe_cells=None,
                        pcg_tol: float = 1e-8,
                        pcg_max_iter: int = 2000
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Mean absolute implied-covariance correlation by grid distance.

    Covariance columns are probed by solving B^{-1} z = e_j with
    conjugate gradients for each probe cell in each of the three field
    blocks.  Diagonal variances are taken per field block as the mean of
    the probed columns' own diagonal entries, which is exact up to
    sampling on a statistically homogeneous torus.  Distances are
    wrapped Euclidean cell distances rounded to integer bins; bin 0 is
    the diagonal itself.
    """
    n = background.n
    d2 = n // 3
    d = int(round(np.sqrt(d2)))
    if 3 * d * d != n:
        raise ValueError("state dimension is not 3*d*d")
    if probe_cells is None:
        step = max(1, d // 2)
        cells = sorted({(0, 0), (step, step)})
        probe_cells = [i * d + j for i, j in cells]
    cols: list[tuple[int, np.ndarray]] = []
    for cell in probe_cells:
        for block in range(3):
            j = block * d2 + cell
            e = np.zeros(n)
            e[j] = 1.0
            z, _ = pcg_solve(background.precision_apply, e,
                             tol=pcg_tol, max_iter=pcg_max_iter)
            cols.append((j, z))
    var = np.zeros(3)
    cnt = np.zeros(3)
    for j, z in cols:
        var[j // d2] += z[j]
        cnt[j // d2] += 1.0
    var /= cnt
    if np.any(var <= 0):
        raise ValueError("probed variances must be positive")

    off = _wrapped_offsets(d)
    n_bins = int(np.rint(np.sqrt(2.0) * (d // 2))) + 1
    sums = np.zeros(n_bins)
    hits = np.zeros(n_bins)
    block_idx = np.arange(d2)
    for j, z in cols:
        cell = j % d2
        ci, cj = divmod(cell, d)
        dx = off[np.abs(block_idx // d - ci)]
        dy = off[np.abs(block_idx % d - cj)]
        bins = np.rint(np.sqrt(dx * dx + dy * dy)).astype(int)
        sj = np.sqrt(var[j // d2])
        for block in range(3):
            corr = np.abs(z[block * d2 + block_idx]
                          / (sj * np.sqrt(var[block])))
            np.add.at(sums, bins, corr)
            np.add.at(hits, bins, 1.0)
    prof = np.where(hits > 0, sums / np.maximum(hits, 1.0), 0.0)
    return np.arange(n_bins), prof
