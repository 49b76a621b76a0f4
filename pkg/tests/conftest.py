from pathlib import Path

import pytest

from reviewfuzz.mock import MockClient
from reviewfuzz.taxonomy import load_taxonomy

ROOT = Path(__file__).resolve().parent.parent
FIXTURE = ROOT / "fixtures" / "php-mini"


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy()


@pytest.fixture(scope="session")
def mock_client():
    return MockClient()


@pytest.fixture(scope="session")
def fixture_dir():
    return FIXTURE


ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
