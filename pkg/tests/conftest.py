import pytest

# Filled by test_acceptance; printed once at the end of the session.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {line}")


@pytest.fixture
def record():
    def _record(num: int, ok: bool, line: str):
        ACCEPTANCE[num] = (bool(ok), line)
        print(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {line}")
    return _record
