"""Backend selection for the stepping kernels.

The compiled extension is preferred when it imported cleanly; otherwise the
numpy reference implementation is used.  set_backend exists so benchmarks
and consistency tests can pin one implementation explicitly.
"""

from __future__ import annotations

from . import _reference

try:
    from . import _core
except ImportError:  # pragma: no cover - depends on build environment
    _core = None

_IMPLS = {"numpy": _reference}
if _core is not None:
    _IMPLS["compiled"] = _core

_active = "compiled" if _core is not None else "numpy"


def available_backends() -> list[str]:
    return sorted(_IMPLS)


def get_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; have {available_backends()}")
    _active = name


def tendency(u, v, h, depth, fcor, g, nu, cb, delta):
    return _IMPLS[_active].tendency(u, v, h, depth, fcor, g, nu, cb, delta)


def rk4_step(u, v, h, depth, fcor, g, nu, cb, delta, dt):
    return _IMPLS[_active].rk4_step(u, v, h, depth, fcor, g, nu, cb, delta, dt)
