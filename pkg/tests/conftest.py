"""Per-criterion pass/fail summary for the acceptance suite."""

from __future__ import annotations

import pytest

_TITLES: dict[str, tuple[int, str]] = {}
_OUTCOMES: dict[int, list[bool]] = {}
_NOTES: dict[int, list[str]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _TITLES[item.nodeid] = (int(m.args[0]), str(m.args[1]))


def pytest_runtest_logreport(report):
    if report.nodeid not in _TITLES:
        return
    num, _ = _TITLES[report.nodeid]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES.setdefault(num, []).append(report.passed)
        _NOTES.setdefault(num, []).extend(v for k, v in report.user_properties if k == "note")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    titles = {num: title for num, title in _TITLES.values()}
    terminalreporter.section("acceptance criteria")
    for num in sorted(titles):
        runs = _OUTCOMES.get(num)
        status = "NOT RUN" if not runs else ("PASS" if all(runs) else "FAIL")
        notes = "; ".join(_NOTES.get(num, []))
        terminalreporter.write_line(f"criterion {num:2d} {titles[num]}: {status}" + (f" ({notes})" if notes else ""))


@pytest.fixture
def note(request):
    """Attach a short measurement to the criterion summary line."""

    def add(text: str) -> None:
        request.node.user_properties.append(("note", text))

    return add
