# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled stepping kernels.  Mirrors sw4dvar._reference exactly."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef void _tendency(double[:, ::1] u, double[:, ::1] v, double[:, ::1] h,
                    double[:, ::1] depth, double[:, ::1] fcor,
                    double g, double nu, double cb, double delta,
                    double[:, ::1] du, double[:, ::1] dv,
                    double[:, ::1] dh) noexcept nogil:
    cdef Py_ssize_t d = u.shape[0]
    cdef Py_ssize_t i, j, ip, im, jp, jm
    cdef double c = 0.5 / delta
    cdef double cnu = nu / (delta * delta)
    cdef double uc, vc, tot
    for i in range(d):
        ip = i + 1 if i + 1 < d else 0
        im = i - 1 if i > 0 else d - 1
        for j in range(d):
            jp = j + 1 if j + 1 < d else 0
            jm = j - 1 if j > 0 else d - 1
            uc = u[i, j]
            vc = v[i, j]
            du[i, j] = (fcor[i, j] * vc - g * c * (h[ip, j] - h[im, j])
                        - cb * uc
                        + cnu * (u[ip, j] + u[im, j] + u[i, jp] + u[i, jm]
                                 - 4.0 * uc)
                        - c * ((u[i, jp] - u[i, jm]) * vc
                               + (u[ip, j] - u[im, j]) * uc))
            dv[i, j] = (-fcor[i, j] * uc - g * c * (h[i, jp] - h[i, jm])
                        - cb * vc
                        + cnu * (v[ip, j] + v[im, j] + v[i, jp] + v[i, jm]
                                 - 4.0 * vc)
                        - c * ((v[ip, j] - v[im, j]) * uc
                               + (v[i, jp] - v[i, jm]) * vc))
            tot = h[i, j] + depth[i, j]
            dh[i, j] = -c * (tot * (u[ip, j] - u[im, j] + v[i, jp] - v[i, jm])
                             + uc * (h[ip, j] + depth[ip, j]
                                     - h[im, j] - depth[im, j])
                             + vc * (h[i, jp] + depth[i, jp]
                                     - h[i, jm] - depth[i, jm]))


def tendency(u, v, h, depth, fcor, double g, double nu, double cb,
             double delta):
    du = np.empty_like(u)
    dv = np.empty_like(v)
    dh = np.empty_like(h)
    _tendency(u, v, h, depth, fcor, g, nu, cb, delta, du, dv, dh)
    return du, dv, dh


def rk4_step(u, v, h, depth, fcor, double g, double nu, double cb,
             double delta, double dt):
    cdef double[:, ::1] uv = u, vv = v, hv = h, dep = depth, fc = fcor
    cdef Py_ssize_t d = uv.shape[0]
    buf = np.empty((15, d, d), dtype=np.float64)
    cdef double[:, :, ::1] b = buf
    cdef double[:, ::1] k1u = b[0], k1v = b[1], k1h = b[2]
    cdef double[:, ::1] k2u = b[3], k2v = b[4], k2h = b[5]
    cdef double[:, ::1] k3u = b[6], k3v = b[7], k3h = b[8]
    cdef double[:, ::1] k4u = b[9], k4v = b[10], k4h = b[11]
    cdef double[:, ::1] su = b[12], sv = b[13], sh = b[14]
    out = np.empty((3, d, d), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef double[:, ::1] ou = o[0], ov = o[1], oh = o[2]
    cdef Py_ssize_t i, j
    cdef double s = 0.5 * dt, w = dt / 6.0
    cdef double peak = 0.0, a

    with nogil:
        _tendency(uv, vv, hv, dep, fc, g, nu, cb, delta, k1u, k1v, k1h)
        for i in range(d):
            for j in range(d):
                su[i, j] = uv[i, j] + s * k1u[i, j]
                sv[i, j] = vv[i, j] + s * k1v[i, j]
                sh[i, j] = hv[i, j] + s * k1h[i, j]
        _tendency(su, sv, sh, dep, fc, g, nu, cb, delta, k2u, k2v, k2h)
        for i in range(d):
            for j in range(d):
                su[i, j] = uv[i, j] + s * k2u[i, j]
                sv[i, j] = vv[i, j] + s * k2v[i, j]
                sh[i, j] = hv[i, j] + s * k2h[i, j]
        _tendency(su, sv, sh, dep, fc, g, nu, cb, delta, k3u, k3v, k3h)
        for i in range(d):
            for j in range(d):
                su[i, j] = uv[i, j] + dt * k3u[i, j]
                sv[i, j] = vv[i, j] + dt * k3v[i, j]
                sh[i, j] = hv[i, j] + dt * k3h[i, j]
        _tendency(su, sv, sh, dep, fc, g, nu, cb, delta, k4u, k4v, k4h)
        for i in range(d):
            for j in range(d):
                a = uv[i, j] + w * (k1u[i, j] + 2.0 * k2u[i, j]
                                    + 2.0 * k3u[i, j] + k4u[i, j])
                ou[i, j] = a
                if a < 0.0:
                    a = -a
                if a > peak:
                    peak = a
                a = vv[i, j] + w * (k1v[i, j] + 2.0 * k2v[i, j]
                                    + 2.0 * k3v[i, j] + k4v[i, j])
                ov[i, j] = a
                if a < 0.0:
                    a = -a
                if a > peak:
                    peak = a
                a = hv[i, j] + w * (k1h[i, j] + 2.0 * k2h[i, j]
                                    + 2.0 * k3h[i, j] + k4h[i, j])
                oh[i, j] = a
                if a < 0.0:
                    a = -a
                if a > peak:
                    peak = a
    return out[0], out[1], out[2], peak
