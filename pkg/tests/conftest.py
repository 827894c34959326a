import numpy as np
import pytest

from ncpp.encode import fit_transforms
from ncpp.schema import default_schema

from builders import synthetic


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def synth_small():
    """40 noiseless nonlinear records and their truth handle."""
    return synthetic(40, seed=3)


@pytest.fixture(scope="session")
def transforms_small(synth_small, schema):
    return fit_transforms(synth_small[0], schema)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance scorecard at the end of the run."""
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
