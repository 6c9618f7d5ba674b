import pytest

_RESULTS = pytest.StashKey[dict]()


class CriterionLog:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def __init__(self, store: dict):
        self.store = store

    def record(self, number: int, ok: bool, detail: str) -> bool:
        self.store[number] = (ok, detail)
        return ok


@pytest.fixture(scope="session")
def criteria(request) -> CriterionLog:
    return CriterionLog(request.config.stash.setdefault(_RESULTS, {}))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, None)
    if results is None:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 10):
        if number in results:
            ok, detail = results[number]
            terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {number}: NOT RUN")
