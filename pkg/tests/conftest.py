from __future__ import annotations

import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}


class CriterionLog:
    def __init__(self, number: int):
        self.number = number

    def record(self, passed: bool, detail: str) -> None:
        _CRITERIA[self.number] = (bool(passed), detail)
        print(f"criterion {self.number}: {'PASS' if passed else 'FAIL'} - {detail}")


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return CriterionLog(marker.args[0])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")
