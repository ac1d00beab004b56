"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_results: dict[str, list[bool]] = {}
_order: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        name = marker.kwargs.get("criterion", item.name)
        if name not in _results:
            _results[name] = []
            _order.append(name)
        _results[name].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _order:
        return
    terminalreporter.section("acceptance criteria")
    for name in _order:
        ok = all(_results[name])
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
