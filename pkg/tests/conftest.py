import numpy as np
import pytest

from fractional_qat.layers import ModelDims, ToyModel

SMALL = ModelDims(d_model=8, n_blocks=1, ff_mult=2, d_out=4)


@pytest.fixture
def small_model():
    return ToyModel.build(SMALL, seed=3, weight_bits=8, act_bits=8)


@pytest.fixture
def small_input():
    return np.random.default_rng(9).standard_normal((3, 4, SMALL.d_model))


# acceptance criteria report one line each at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
