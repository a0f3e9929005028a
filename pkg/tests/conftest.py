import numpy as np
import pytest

from cpensemble import Dataset, generate_synthetic
from cpensemble.data import FeatureKind, FeatureSpec

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """``criterion(n, title, passed, detail)`` prints and records one PASS/FAIL line."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} {number}: {title} ({detail})"
        print(line)
        request.config.stash[_ACCEPTANCE].append(line)
        return passed

    return record


@pytest.fixture
def tiny_mixed():
    """Six examples, one numeric and one categorical feature, some values missing."""
    schema = (
        FeatureSpec("age", FeatureKind.NUMERIC),
        FeatureSpec("gender", FeatureKind.CATEGORICAL, ("F", "M")),
    )
    X = np.array(
        [[70.0, 0], [72.0, 1], [np.nan, 0], [60.0, 1], [61.0, np.nan], [65.0, 1]]
    )
    y = np.array([1, 1, 1, 0, 0, 0])
    return Dataset(schema, X, y, ("sMCI", "cMCI"), tuple(str(i) for i in range(6)))


@pytest.fixture(scope="session")
def cohort():
    return generate_synthetic(120, 8, separation=1.0, noise_rate=0.1, seed=3)
