import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test decides")


@pytest.fixture
def detail(request):
    """Free-form facts a test wants printed next to its PASS/FAIL line."""
    marker = request.node.get_closest_marker("criterion")
    store = {}
    if marker is not None:
        _RESULTS.setdefault(marker.args[0], {"title": marker.args[1]})["detail"] = store
    return store


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    entry = _RESULTS.setdefault(marker.args[0], {"title": marker.args[1]})
    if rep.when == "call" or rep.failed:
        entry["passed"] = rep.passed and entry.get("passed", True)
        entry["seconds"] = entry.get("seconds", 0.0) + rep.duration


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        status = "PASS" if r.get("passed") else "FAIL"
        facts = ", ".join(f"{k}={_fmt(v)}" for k, v in r.get("detail", {}).items())
        line = f"criterion {n} {status}: {r['title']} ({r.get('seconds', 0.0):.1f}s)"
        terminalreporter.write_line(line + (f" [{facts}]" if facts else ""))


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)
