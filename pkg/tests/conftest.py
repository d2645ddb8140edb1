import numpy as np
import pytest

from fedper import nn


def toy_cnn(rng, size=6, filters=2, units=3, bn=True, dtype="float64"):
    layers = [nn.Conv2D(filters, (3, 3))]
    if bn:
        layers.append(nn.BatchNorm())
    layers += [nn.ReLU(), nn.MaxPool(2, 2), nn.Dense(units), nn.ReLU(), nn.Dense(1), nn.Sigmoid()]
    return nn.Model(tuple(layers), (size, size, 1), dtype=dtype)


def logistic(n_in):
    return nn.Model((nn.Dense(1), nn.Sigmoid()), (n_in,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
