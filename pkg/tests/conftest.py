import numpy as np
import pytest

from otbump._kernels import backends


@pytest.fixture
def rng():
    return np.random.default_rng(20260101)


@pytest.fixture(params=sorted(backends()))
def kernel_backend(request):
    return backends()[request.param]
