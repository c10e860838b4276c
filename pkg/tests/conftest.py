import numpy as np
import pytest

from climfuse.oracles import oracle_instance


@pytest.fixture
def small_state():
    """n = 4, M = 3 instance drawn from proper priors."""
    return oracle_instance(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from harness import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
