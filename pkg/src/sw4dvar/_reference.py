"""Pure-numpy stepping kernels, the fallback when sw4dvar._core is absent.

All functions operate on (d, d) C-contiguous float64 fields.  Periodic
wrap-around is expressed with np.roll: roll(a, -1, axis) holds a[i+1] at
index i.  The first array axis is the x direction, the second is y.
"""

import numpy as np


def _dx(a):
    return np.roll(a, -1, 0) - np.roll(a, 1, 0)


def _dy(a):
    return np.roll(a, -1, 1) - np.roll(a, 1, 1)


def _lap(a):
    return (np.roll(a, -1, 0) + np.roll(a, 1, 0)
            + np.roll(a, -1, 1) + np.roll(a, 1, 1) - 4.0 * a)


def tendency(u, v, h, depth, fcor, g, nu, cb, delta):
    """Time derivative of (u, v, h) on the periodic grid."""
    c = 0.5 / delta
    cnu = nu / (delta * delta)
    du = (fcor * v - g * c * _dx(h) - cb * u + cnu * _lap(u)
          - c * (_dy(u) * v + _dx(u) * u))
    dv = (-fcor * u - g * c * _dy(h) - cb * v + cnu * _lap(v)
          - c * (_dx(v) * u + _dy(v) * v))
    tot = h + depth
    dh = -c * (tot * (_dx(u) + _dy(v)) + u * _dx(tot) + v * _dy(tot))
    return du, dv, dh


def rk4_step(u, v, h, depth, fcor, g, nu, cb, delta, dt):
    """One classical Runge-Kutta step; returns new fields and max |value|."""
    args = (depth, fcor, g, nu, cb, delta)
    k1u, k1v, k1h = tendency(u, v, h, *args)
    s = 0.5 * dt
    k2u, k2v, k2h = tendency(u + s * k1u, v + s * k1v, h + s * k1h, *args)
    k3u, k3v, k3h = tendency(u + s * k2u, v + s * k2v, h + s * k2h, *args)
    k4u, k4v, k4h = tendency(u + dt * k3u, v + dt * k3v, h + dt * k3h, *args)
    w = dt / 6.0
    nu_ = u + w * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    nv_ = v + w * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    nh_ = h + w * (k1h + 2.0 * k2h + 2.0 * k3h + k4h)
    peak = max(np.abs(nu_).max(), np.abs(nv_).max(), np.abs(nh_).max())
    return nu_, nv_, nh_, float(peak)
