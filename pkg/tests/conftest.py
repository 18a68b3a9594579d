from __future__ import annotations

import numpy as np
import pytest

from bloch_caustics import LEVITT, EnsembleMember, parse_sequence
from bloch_caustics.ensemble import FIELD, OFFSET, make_ensemble

# criterion label -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(label: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[label] = (bool(passed), detail)


@pytest.fixture(scope="session")
def levitt():
    return parse_sequence(LEVITT)


@pytest.fixture(scope="session")
def nominal():
    return EnsembleMember(field_scale=1.0, offset=0.0)


@pytest.fixture(scope="session")
def field_ensemble():
    return make_ensemble(FIELD)


@pytest.fixture(scope="session")
def offset_ensemble():
    return make_ensemble(OFFSET)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0])):
        passed, detail = ACCEPTANCE[label]
        tr.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
