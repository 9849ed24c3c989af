import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def central_diff(f, x, eps=1e-6):
    """Dense central-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = float(f(x))
        flat[i] = keep - eps
        lo = float(f(x))
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * eps)
    return g
