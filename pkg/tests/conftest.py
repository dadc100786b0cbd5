import pytest

_CRITERIA: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of a numbered acceptance criterion; returns ``ok``."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(ok), title, detail)
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, max(12, max(_CRITERIA)) + 1):
        ok, title, detail = _CRITERIA.get(number, (False, "not evaluated", "test errored or was deselected"))
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
