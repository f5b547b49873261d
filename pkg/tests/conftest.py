"""Per-criterion PASS/FAIL summary for tests marked ``@pytest.mark.criterion(n, title)``."""
import pytest

_RESULTS = {}  # n -> [title, status]
_NOTES = {}  # n -> list of measurement strings


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        n, title = m.args
        entry = _RESULTS.setdefault(n, [title, "PASS"])
        if rep.failed:
            entry[1] = "FAIL"
        elif rep.skipped and entry[1] == "PASS":
            entry[1] = "SKIP"
    return rep


@pytest.fixture
def note(request):
    """Record a measurement to show next to the criterion's summary line."""
    m = request.node.get_closest_marker("criterion")
    key = m.args[0] if m else None
    return lambda text: _NOTES.setdefault(key, []).append(text)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, status = _RESULTS[n]
        tr.write_line(f"criterion {n}: {status}  {title}")
        for text in _NOTES.get(n, []):
            tr.write_line(f"    {text}")
