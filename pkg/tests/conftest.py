import numpy as np
import pytest


def finite_diff(f, params, eps=1e-5):
    """Central finite-difference gradient of a scalar function of arrays."""
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(np.asarray(p, dtype=np.float64))
        flat = g.reshape(-1)
        base = [np.array(q, dtype=np.float64) for q in params]
        for i in range(flat.size):
            plus = [q.copy() for q in base]
            minus = [q.copy() for q in base]
            plus[k].reshape(-1)[i] += eps
            minus[k].reshape(-1)[i] -= eps
            flat[i] = (f(plus) - f(minus)) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    denom = max(np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
