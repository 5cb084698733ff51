import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kflow import model as M

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

BUILTINS = ("euclidean", "hyperbolic", "hyperbolic-product")


@pytest.fixture(params=BUILTINS)
def builtin_model(request):
    return M.builtin(request.param, 2)


def hemisphere(r, R=1.0):
    return np.sqrt(R * R - np.asarray(r) ** 2)
