import pytest

CRITERIA_LINES: list = []


@pytest.fixture
def criterion():
    def record(k: int, ok: bool, detail: str):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        CRITERIA_LINES.append((k, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(CRITERIA_LINES, key=lambda kv: kv[0]):
            terminalreporter.write_line(line)
