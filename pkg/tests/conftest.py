import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sacn.tensor import Tensor, precision
from sacn.train import numeric_gradient, relative_error

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def check_grads(build, inputs, tol=1e-6):
    """Compare tape gradients of sum(build(*inputs) * r) with central differences.

    ``inputs`` are float64 arrays; returns the worst relative error.
    """
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    out = build(*tensors)
    r = np.random.default_rng(7).normal(size=out.shape)
    (out * Tensor(r)).sum().backward()
    worst = 0.0
    for t in tensors:
        def f():
            return float(np.sum(build(*[Tensor(u.data) for u in tensors]).data * r))
        err = relative_error(t.grad, numeric_gradient(f, t.data))
        worst = max(worst, err)
    assert worst < tol, worst
    return worst
