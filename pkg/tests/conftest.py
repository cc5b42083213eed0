from __future__ import annotations

import numpy as np
import pytest

from cdmpo.nets import Mlp, flatten, set_flat


def flat_grads(grads) -> np.ndarray:
    parts = []
    for gw, gb in grads:
        parts.append(gw.ravel())
        parts.append(gb.ravel())
    return np.concatenate(parts)


def finite_diff(f, net: Mlp, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of the scalar f() over net parameters."""
    base = flatten(net).copy()
    grad = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] += h
        set_flat(net, bumped)
        up = f()
        bumped[i] -= 2.0 * h
        set_flat(net, bumped)
        down = f()
        grad[i] = (up - down) / (2.0 * h)
    set_flat(net, base)
    return grad


def assert_grads_close(analytic, numeric, rtol=1e-5, atol=1e-8):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
