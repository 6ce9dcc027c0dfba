import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = [f"A{i}" for i in range(1, 11)]
_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; returns ``ok`` so tests can assert on it."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(criterion: str, ok: bool, detail: str) -> bool:
        store[criterion] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for c in CRITERIA:
        if c in store:
            ok, detail = store[c]
            terminalreporter.write_line(f"{c:<4}{'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"{c:<4}----  not run")
