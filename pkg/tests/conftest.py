import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (title, [outcomes], [detail lines])
_CRITERIA: dict[int, tuple[str, list[str], list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion check")


@pytest.fixture
def record(request):
    """Attach a one-line measurement to the current criterion's summary."""
    marker = request.node.get_closest_marker("criterion")

    def _record(text: str) -> None:
        if marker is not None:
            _CRITERIA.setdefault(marker.args[0], (marker.args[1], [], []))[2].append(text)

    return _record


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = next((m for m in getattr(report, "criterion_markers", [])), None)
    if marker is None:
        return
    num, title = marker
    entry = _CRITERIA.setdefault(num, (title, [], []))
    entry[1].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion_markers = [(m.args[0], m.args[1])]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, outcomes, details = _CRITERIA[num]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "FAIL"
        line = f"criterion {num} [{status}] {title}"
        if details:
            line += " :: " + "; ".join(details)
        tr.write_line(line)
