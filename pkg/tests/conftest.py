import numpy as np
import pytest

from loracompose.tensor_store import AdapterBundle

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): exit criterion from the acceptance list")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = None
    for name, value in report.user_properties:
        if name == "criterion":
            crit = value
    if crit is not None:
        _ACCEPTANCE.append((crit[0], crit[1], "PASS" if report.passed else "FAIL"))


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            item.user_properties.append(("criterion", tuple(marker.args)))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    by_crit: dict[tuple, list[str]] = {}
    for n, title, status in _ACCEPTANCE:
        by_crit.setdefault((n, title), []).append(status)
    for (n, title), statuses in sorted(by_crit.items()):
        status = "PASS" if all(s == "PASS" for s in statuses) else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {n}: {title} ({statuses.count('PASS')}/{len(statuses)} checks)")


def make_bundle(adapter_id, arrays, scale=1.0):
    return AdapterBundle.from_arrays(adapter_id, {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}, scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
