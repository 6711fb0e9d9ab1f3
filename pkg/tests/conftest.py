from hypothesis import HealthCheck, settings
import pytest

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA.append((marker.args[0], status, marker.args[1], item.name))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid, status, text, name in sorted(_CRITERIA, key=lambda c: (int(c[0].rstrip("abcdef")), c[0])):
        terminalreporter.write_line(f"criterion {cid:<4} {status:<5} {text}  [{name}]")
