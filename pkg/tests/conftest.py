import numpy as np
import pytest

from listda import autodiff as ad


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def grad_check(build, x, eps=1e-6):
    """Analytic vs central-difference gradient of the scalar ``build(node)`` at ``x``."""
    node = ad.parameter(x)
    analytic = ad.backward(build(node))[node]
    numeric = ad.numerical_grad(lambda v: build(ad.constant(v)).item(), x, eps=eps)
    return rel_error(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
