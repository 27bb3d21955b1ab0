import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from fedlag.nn import MlpSpec, init_model


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    # repeat the acceptance verdicts after the run so they survive capture
    lines = getattr(terminalreporter.config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance checklist")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def g():
    return np.random.default_rng(20260816)


def small_model(seed=0, input_dim=3, hidden=(4,), num_classes=3, activation="relu"):
    spec = MlpSpec(input_dim, tuple(hidden), num_classes, activation)
    return spec, init_model(spec, seed)


def rand_batch(g, n, input_dim, num_classes):
    x = g.normal(size=(n, input_dim))
    y = g.integers(0, num_classes, size=n)
    return x, y
