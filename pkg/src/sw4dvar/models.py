"""Model abstraction used by the Jacobian builder and the solvers.

Both supported dynamics have right-hand sides that are quadratic in the
state,

    dx/dt = rhs(x) = L x + N(x, x),

with L a sparse matrix and N a bilinear map.  The Taylor-series Jacobian
factors and their recursions only ever touch the model through

    rhs(x)            the full tendency,
    linear_matrix()   L as a sparse matrix,
    quad_apply(a, b)  N(a, b) as a vector (not necessarily symmetric),
    quad_jacobian(y)  the sparse matrix of v -> N(y, v) + N(v, y),
    integrate(...)    the nonlinear flow,

so tests can swap the shallow-water model for a plain linear one with a
known closed-form flow.

For the shallow-water model the two sparse matrices are assembled from
five-point stencil templates cached per grid size; each entry block is a
vectorised field expression, so assembly costs O(n).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import dynamics
from .dynamics import ModelParams, Trajectory
from .errors import DivergenceError

_OFFSETS = ("c", "xp", "xm", "yp", "ym")


class _StencilTemplate:
    """Cached index arrays for d x d torus stencil matrices."""

    def __init__(self, d: int):
        self.d = d
        dd = d * d
        i, j = np.divmod(np.arange(dd), d)
        self.cols = {
            "c": np.arange(dd),
            "xp": ((i + 1) % d) * d + j,
            "xm": ((i - 1) % d) * d + j,
            "yp": i * d + (j + 1) % d,
            "ym": i * d + (j - 1) % d,
        }
        self.rows = np.arange(dd)

    def assemble(self, groups) -> sp.csr_matrix:
        """groups: iterable of (row_block, col_block, offset, data(d*d))."""
        dd = self.d * self.d
        n = 3 * dd
        rows, cols, data = [], [], []
        for rb, cb, off, values in groups:
            rows.append(self.rows + rb * dd)
            cols.append(self.cols[off] + cb * dd)
            data.append(np.ravel(values))
        mat = sp.coo_matrix(
            (np.concatenate(data),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n))
        return mat.tocsr()


_TEMPLATES: dict[int, _StencilTemplate] = {}


def _template(d: int) -> _StencilTemplate:
    if d not in _TEMPLATES:
        _TEMPLATES[d] = _StencilTemplate(d)
    return _TEMPLATES[d]


def _dx(a):
    return np.roll(a, -1, 0) - np.roll(a, 1, 0)


def _dy(a):
    return np.roll(a, -1, 1) - np.roll(a, 1, 1)


def rk4_integrate(model, x0: np.ndarray, t0: float, t1: float, dt: float,
                  record_at=None) -> Trajectory:
    """Generic Runge-Kutta driver for models without a fast kernel."""
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    if record_at is None:
        record_at = [t1]
    times = sorted(float(t) for t in record_at)
    if not times:
        raise ValueError("record_at must name at least one time")
    marks = {}
    for t in times:
        marks.setdefault(dynamics._substep_index(t, t0, dt), t)
    nsteps = dynamics._substep_index(t1, t0, dt)
    x = np.array(x0, dtype=np.float64)
    out_t, out_x = [], []
    if 0 in marks:
        out_t.append(marks[0])
        out_x.append(x.copy())
    for m in range(1, nsteps + 1):
        k1 = model.rhs(x)
        k2 = model.rhs(x + 0.5 * dt * k1)
        k3 = model.rhs(x + 0.5 * dt * k2)
        k4 = model.rhs(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        peak = float(np.abs(x).max())
        if not np.isfinite(peak) or peak > dynamics.BLOWUP_CAP:
            raise DivergenceError(
                f"state magnitude {peak:.3g} exceeded the cap")
        if m in marks:
            out_t.append(marks[m])
            out_x.append(x.copy())
    return Trajectory(np.array(out_t), np.array(out_x))


class SweModel:
    """Shallow-water dynamics exposed through the quadratic-model protocol."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.n = params.n
        self._linear: sp.csr_matrix | None = None

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return dynamics.tendency(x, self.params)

    def max_dt(self) -> float:
        return self.params.dt_cap()

    def integrate(self, x0, t0, t1, dt, record_at=None) -> Trajectory:
        return dynamics.integrate(x0, self.params, t0, t1, dt, record_at)

    def linear_matrix(self) -> sp.csr_matrix:
        if self._linear is None:
            p = self.params
            d = p.d
            tm = _template(d)
            c = 0.5 / p.delta
            cnu = p.nu / (p.delta * p.delta)
            one = np.ones((d, d))
            phi = p.depth
            fld = p.f_field
            groups = [
                (0, 0, "c", (-p.cb - 4.0 * cnu) * one),
                (0, 0, "xp", cnu * one), (0, 0, "xm", cnu * one),
                (0, 0, "yp", cnu * one), (0, 0, "ym", cnu * one),
                (0, 1, "c", fld),
                (0, 2, "xp", -p.g * c * one), (0, 2, "xm", p.g * c * one),
                (1, 0, "c", -fld),
                (1, 1, "c", (-p.cb - 4.0 * cnu) * one),
                (1, 1, "xp", cnu * one), (1, 1, "xm", cnu * one),
                (1, 1, "yp", cnu * one), (1, 1, "ym", cnu * one),
                (1, 2, "yp", -p.g * c * one), (1, 2, "ym", p.g * c * one),
                (2, 0, "xp", -c * phi), (2, 0, "xm", c * phi),
                (2, 0, "c", -c * _dx(phi)),
                (2, 1, "yp", -c * phi), (2, 1, "ym", c * phi),
                (2, 1, "c", -c * _dy(phi)),
            ]
            self._linear = tm.assemble(groups)
        return self._linear

    def quad_apply(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        p = self.params
        c = 0.5 / p.delta
        au, av, ah = dynamics.split_fields(np.asarray(a, float), p.d)
        bu, bv, bh = dynamics.split_fields(np.asarray(b, float), p.d)
        out_u = -c * (_dy(au) * bv + _dx(au) * bu)
        out_v = -c * (_dx(av) * bu + _dy(av) * bv)
        out_h = -c * (ah * (_dx(bu) + _dy(bv)) + bu * _dx(ah) + bv * _dy(ah))
        return dynamics.join_fields(out_u, out_v, out_h)

    def quad_jacobian(self, y: np.ndarray) -> sp.csr_matrix:
        p = self.params
        d = p.d
        tm = _template(d)
        c = 0.5 / p.delta
        yu, yv, yh = dynamics.split_fields(np.asarray(y, float), d)
        groups = [
            (0, 0, "c", -c * _dx(yu)),
            (0, 0, "xp", -c * yu), (0, 0, "xm", c * yu),
            (0, 0, "yp", -c * yv), (0, 0, "ym", c * yv),
            (0, 1, "c", -c * _dy(yu)),
            (1, 0, "c", -c * _dx(yv)),
            (1, 1, "c", -c * _dy(yv)),
            (1, 1, "xp", -c * yu), (1, 1, "xm", c * yu),
            (1, 1, "yp", -c * yv), (1, 1, "ym", c * yv),
            (2, 0, "xp", -c * yh), (2, 0, "xm", c * yh),
            (2, 0, "c", -c * _dx(yh)),
            (2, 1, "yp", -c * yh), (2, 1, "ym", c * yh),
            (2, 1, "c", -c * _dy(yh)),
            (2, 2, "c", -c * (_dx(yu) + _dy(yv))),
            (2, 2, "xp", -c * yu), (2, 2, "xm", c * yu),
            (2, 2, "yp", -c * yv), (2, 2, "ym", c * yv),
        ]
        return tm.assemble(groups)


class LinearModel:
    """dx/dt = A x, integrated with the same Runge-Kutta scheme.

    For linear dynamics one Runge-Kutta step is exactly the degree-4
    truncation of expm(dt*A), which makes flows and their Jacobians
    reproducible in closed form; tests lean on that.
    """

    def __init__(self, a_matrix):
        a = sp.csr_matrix(a_matrix)
        if a.shape[0] != a.shape[1]:
            raise ValueError("A must be square")
        self.a = a
        self.n = a.shape[0]
        self._zero = sp.csr_matrix((self.n, self.n))

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return self.a @ x

    def max_dt(self) -> float:
        return np.inf

    def integrate(self, x0, t0, t1, dt, record_at=None) -> Trajectory:
        return rk4_integrate(self, x0, t0, t1, dt, record_at)

    def linear_matrix(self) -> sp.csr_matrix:
        return self.a

    def quad_apply(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.zeros(self.n)

    def quad_jacobian(self, y: np.ndarray) -> sp.csr_matrix:
        return self._zero
