import pytest

_RESULTS = pytest.StashKey[dict]()
CRITERIA = range(1, 11)


@pytest.fixture
def record_criterion(request):
    """Store and print one PASS/FAIL line per acceptance criterion."""
    store = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        store[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        if n in store:
            ok, detail = store[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
