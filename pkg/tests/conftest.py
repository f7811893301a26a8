import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    ok = report.outcome == "passed"
    prev = _CRITERIA.get(number)
    detail = props.get("detail", "")
    if prev is None:
        _CRITERIA[number] = [title, ok, [detail] if detail else []]
    else:
        prev[1] = prev[1] and ok
        if detail:
            prev[2].append(detail)


@pytest.fixture(autouse=True)
def _criterion_property(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", tuple(mark.args))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
