import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    results = item.config.stash.setdefault(_RESULTS, {})
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    results[mark.args[0]] = (rep.passed, mark.args[1], detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
