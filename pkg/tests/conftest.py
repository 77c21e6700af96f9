import pytest

ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the terminal summary, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(num: int, name: str, passed: bool, detail: str, gated: bool = True):
        tag = "PASS" if passed else ("FAIL" if gated else "DEVIATION")
        line = f"[{tag}] {num:>2}. {name}: {detail}"
        lines.append((num, line))
        print(line)
        if gated:
            assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
