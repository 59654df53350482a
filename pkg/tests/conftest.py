import pytest

# filled by test_acceptance.py: criterion number -> line
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def verdict():
    """verdict(k, name, ok, detail) records and prints one line, then asserts ok."""
    def record(k, name, ok, detail):
        line = f"criterion {k} {'PASS' if ok else 'FAIL'}: {name}: {detail}"
        ACCEPTANCE[k] = line
        print(line)
        assert ok, line
    return record
