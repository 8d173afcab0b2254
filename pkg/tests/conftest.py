from __future__ import annotations

import numpy as np
import pytest

from moprune.toynet import LayerCapture, capture, generate_dataset, init_net, train


def random_capture(rng, d_out: int, d_in: int, N: int):
    cap = LayerCapture(rng.standard_normal((d_in, N)), rng.standard_normal((d_out, d_in, N)))
    return cap, rng.standard_normal((d_out, d_in))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained():
    """A small trained 16-32-32-4 net, its data and its calibration capture."""
    data = generate_dataset(0, 600, 4, 16)
    net = train(init_net([16, 32, 32, 4], 0), data, 600, 0.05).net
    X, y = data.split("calibration")
    return net, data, capture(net, X, y)
