import numpy as np
import pytest


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at 1-D point x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    """Worst elementwise relative error, with the scale floored at a fraction
    of the largest entry so finite-difference noise on near-zero entries does
    not dominate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    global_scale = max(np.max(np.abs(a), initial=0.0),
                       np.max(np.abs(b), initial=0.0))
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)),
                       max(floor, 1e-3 * global_scale))
    return float(np.max(np.abs(a - b) / scale))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
