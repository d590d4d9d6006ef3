import re

import pytest

_RESULTS = pytest.StashKey[dict]()
_COLLECTED = pytest.StashKey[set]()
_NAME = re.compile(r"test_criterion_(\d+)")


@pytest.fixture
def criterion(request):
    """Returns ``record(number, passed, detail)``; lines are repeated in the terminal summary."""
    store = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
        store[number] = line
        print(line)
        return passed

    return record


def pytest_collection_finish(session):
    # runs after -k/-m deselection, so only selected criteria are reported
    numbers = set()
    for item in session.items:
        m = _NAME.match(item.name)
        if m:
            numbers.add(int(m.group(1)))
    session.config.stash[_COLLECTED] = numbers


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    numbers = config.stash.get(_COLLECTED, set())
    if not numbers:
        return
    store = config.stash.get(_RESULTS, {})
    terminalreporter.section("acceptance criteria")
    for n in sorted(numbers):
        terminalreporter.write_line(store.get(n, f"criterion {n:2d} FAIL: not evaluated (error before the check)"))
