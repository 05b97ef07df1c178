import numpy as np
import pytest

from sw4dvar.dynamics import ModelParams
from sw4dvar.harness import depth_profile, initial_fields
from sw4dvar.models import SweModel


def small_params(d: int = 5, delta: float = 1.0e4, nu: float = 1e-3,
                 cb: float = 1e-5, f: float = 1e-4) -> ModelParams:
    """Benchmark-shaped parameters on a small grid."""
    return ModelParams(depth=depth_profile(d, delta).reshape(d, d),
                       f=f, g=9.81, nu=nu, cb=cb, delta=delta)


def bounded_state(d: int, rng: np.random.Generator,
                  scale: float = 0.5) -> np.ndarray:
    """Random state with |u|,|v| ~ scale and small h, safely inside the
    stability region of the benchmark grids."""
    x = scale * rng.standard_normal(3 * d * d)
    x[2 * d * d:] *= 2.0
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def params5():
    return small_params(5)


@pytest.fixture
def model5(params5):
    return SweModel(params5)


@pytest.fixture
def state5(params5):
    return initial_fields(5, params5.delta)
