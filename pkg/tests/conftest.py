import pytest

_OUTCOMES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_OUTCOMES] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return report
    # an expected failure still fails its criterion; only plain skips are ignored
    xfailed = hasattr(report, "wasxfail") and report.skipped
    if report.when == "call" and report.skipped and not xfailed:
        return report
    if report.when == "call" or report.failed:
        number, title = marker.args
        entry = item.config.stash[_OUTCOMES].setdefault(number, {"title": title, "ok": True, "notes": []})
        entry["ok"] = entry["ok"] and report.passed
        entry["notes"] += [str(v) for k, v in item.user_properties if k == "measured"]
        if xfailed:
            entry["notes"].append(f"{item.name}: FAIL (known, {report.wasxfail})")
    return report


def pytest_terminal_summary(terminalreporter, config):
    outcomes = config.stash[_OUTCOMES]
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(outcomes):
        entry = outcomes[number]
        line = f"criterion {number:>2} {entry['title']}: {'PASS' if entry['ok'] else 'FAIL'}"
        terminalreporter.write_line(line)
        for note in entry["notes"]:
            terminalreporter.write_line(f"    {note}")
