import numpy as np
import pytest

from orchestra.nn import Mlp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_gradient(loss_fn, net: Mlp, h: float = 1e-5):
    """Central finite differences of loss_fn() w.r.t. every net parameter."""
    grads = []
    for p in net.parameters:
        base = p.data.copy()
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            p.data = base.copy()
            p.data[idx] += h
            lp = loss_fn()
            p.data = base.copy()
            p.data[idx] -= h
            lm = loss_fn()
            g[idx] = (lp - lm) / (2 * h)
        p.data = base
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.zeros_like(n) if a is None else a
        denom = np.maximum(np.abs(n), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
