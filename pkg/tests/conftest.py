import pytest

from mrdesc import dataset as ds
from mrdesc import network

FIXTURE_SEED = 7


@pytest.fixture(scope="session")
def scene():
    """Ten points, four views each."""
    return ds.gen_synth(10, 4, seed=FIXTURE_SEED)


@pytest.fixture(scope="session")
def net():
    return network.init(0)


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_RESULTS = pytest.StashKey[dict]()
_DETAIL = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def detail(request):
    """Append human-readable measurements to the criterion's summary line."""
    notes = request.node.stash.setdefault(_DETAIL, [])
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    number, title = mark.args
    notes = "; ".join(item.stash.get(_DETAIL, []))
    item.config.stash[_RESULTS][number] = (title, report.passed, notes)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, notes = results[number]
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title}"
        terminalreporter.write_line(line + (f"  ({notes})" if notes else ""))
