"""Session fixtures for the desk-scale acceptance runs and the criterion report."""

import os
from pathlib import Path

import pytest

REPORT: list[str] = []


def record(number: int, passed: bool, detail: str):
    """Queue one acceptance line for the end-of-run summary."""
    REPORT.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory):
    """Working directory for desk runs.

    Set RECONNET_DESK_CACHE to a directory to keep the sample corpus and
    trained checkpoints between sessions.
    """
    cache = os.environ.get("RECONNET_DESK_CACHE")
    if cache:
        path = Path(cache)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("desk")
