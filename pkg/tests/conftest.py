import numpy as np
import pytest

from treeg.discrete import DiscreteCore, TabularDataDistribution, TabularDenoiser
from treeg.rng import stream


@pytest.fixture
def rng():
    return stream(1234, "test")


def random_table(rng, D, S, sparsity=0.0):
    t = rng.random((S,) * D) * (rng.random((S,) * D) >= sparsity)
    t.flat[0] += 1e-3
    return TabularDataDistribution(t / t.sum())


@pytest.fixture
def small_discrete(rng):
    """D=3, S=3 tabular core with a dense random table."""
    return DiscreteCore(10, TabularDenoiser(random_table(rng, 3, 3)))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
