import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # shared helpers such as gradient_cases

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def acceptance(request):
    """``with acceptance(n, title) as notes:`` records PASS/FAIL for criterion ``n``.

    ``notes`` is a list; strings appended to it are shown next to the verdict.
    """
    results = request.config.stash[_RESULTS]

    @contextmanager
    def record(number: int, title: str):
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            first = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            results[number] = ("FAIL", title, notes + [first[:160]])
            raise
        results[number] = ("PASS", title, notes)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        verdict, title, notes = results[number]
        detail = f" ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"CRITERION {number} {verdict}: {title}{detail}")
