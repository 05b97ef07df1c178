"""Backend agreement: the compiled kernels and the numpy reference must
produce identical trajectories."""

import numpy as np
import pytest

from sw4dvar import kernels
from sw4dvar.dynamics import split_fields

from conftest import bounded_state, small_params


@pytest.fixture
def fields(rng):
    params = small_params(d=7)
    u, v, h = split_fields(bounded_state(7, rng, scale=0.4), 7)
    return params, u, v, h


@pytest.fixture(autouse=True)
def restore_backend():
    before = kernels.get_backend()
    yield
    kernels.set_backend(before)


def per_backend(fn):
    out = {}
    for name in kernels.available_backends():
        kernels.set_backend(name)
        assert kernels.get_backend() == name
        out[name] = fn()
    return out


def test_compiled_backend_is_built():
    # The package ships the extension; if it failed to build only the
    # reference backend would be importable.
    assert "numpy" in kernels.available_backends()
    assert "compiled" in kernels.available_backends()


def test_tendency_agreement(fields):
    params, u, v, h = fields
    results = per_backend(lambda: kernels.tendency(
        u, v, h, params.depth, params.f_field, params.g, params.nu,
        params.cb, params.delta))
    ref = results["numpy"]
    for name, got in results.items():
        for block_got, block_ref in zip(got, ref):
            np.testing.assert_allclose(block_got, block_ref,
                                       rtol=1e-13, atol=1e-15)


def test_rk4_step_agreement(fields):
    params, u, v, h = fields
    results = per_backend(lambda: kernels.rk4_step(
        u, v, h, params.depth, params.f_field, params.g, params.nu,
        params.cb, params.delta, 5.0))
    ref = results["numpy"]
    for name, got in results.items():
        *blocks, peak = got
        *ref_blocks, ref_peak = ref
        for block_got, block_ref in zip(blocks, ref_blocks):
            np.testing.assert_allclose(block_got, block_ref,
                                       rtol=1e-12, atol=1e-14)
        assert peak == pytest.approx(ref_peak, rel=1e-12)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError, match="unknown backend"):
        kernels.set_backend("fortran")


def test_set_backend_round_trip():
    start = kernels.get_backend()
    for name in kernels.available_backends():
        kernels.set_backend(name)
        assert kernels.get_backend() == name
    kernels.set_backend(start)
    assert kernels.get_backend() == start
