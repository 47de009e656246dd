import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Call as ``criterion(k, ok, detail)``; the line is printed at session end."""

    def record(k: int, ok: bool, detail: str) -> bool:
        _CRITERIA[k] = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_runtest_makereport(item, call):
    # a criterion test that errors before recording still gets a line
    if call.when == "call" and call.excinfo is not None:
        k = getattr(item.function, "criterion_id", None)
        if k is not None and k not in _CRITERIA:
            _CRITERIA[k] = f"criterion {k:2d}: FAIL  {call.excinfo.typename}: {call.excinfo.value}"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])
