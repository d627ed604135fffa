import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=100)
settings.load_profile("repo")

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and call.excinfo is None
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


@pytest.fixture()
def detail(record_property):
    """Attach a one-line measurement to the acceptance summary."""
    return lambda text: record_property("detail", text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        info = "; ".join(entry["details"])
        terminalreporter.write_line(f"[{status}] {number}. {entry['title']}" + (f" ({info})" if info else ""))
