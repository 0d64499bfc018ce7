"""Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary."""

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return rep
    n, title = mark.args
    results = item.config.stash[_RESULTS]
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        results[n] = (title, "PASS" if rep.passed else "FAIL", detail)
    return rep


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, status, detail = results[n]
        line = f"{status} {n:2d}. {title}"
        terminalreporter.write_line(f"{line} | {detail}" if detail else line)
