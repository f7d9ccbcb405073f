import pytest


def pytest_configure(config):
    config.acceptance_report = {}


@pytest.fixture
def acceptance_report(request):
    return request.config.acceptance_report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = getattr(config, "acceptance_report", {})
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(report):
        status, title, detail = report[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}: {detail}")
