import numpy as np
import pytest

from spectralflow.algebra import Region
from spectralflow.dynamics import diagonalize
from spectralflow.filter import FilterFunction, FilterParams
from spectralflow.flow import build_tfi_path, hamiltonian_at

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def unit_filter():
    return FilterFunction(FilterParams(), 1.0)


@pytest.fixture(scope="session")
def tfi6():
    """TFI chain of 6 sites at h = 2 with gamma = 0.45 gap."""
    region = Region.chain(6)
    path = build_tfi_path(6, 2.0, 2.0)
    spec = diagonalize(hamiltonian_at(path, region, 0.0))
    return region, path, spec, FilterFunction(FilterParams(), 0.45 * spec.gap)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
