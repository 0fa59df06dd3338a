import warnings
from pathlib import Path

import pytest

from attmil.dataio import SynthSpec, generate_synthetic

_criteria: dict[str, str] = {}


@pytest.fixture(scope="session")
def small_synth():
    ds, truth = generate_synthetic(SynthSpec(n_bags=200, seed=11))
    return ds, truth


@pytest.fixture(autouse=True)
def _quiet_metric_warnings():
    from attmil.evaluation import MetricWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        yield


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.skipped):
        return
    if Path(report.fspath).name != "test_acceptance.py":
        return
    status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    _criteria[report.nodeid.split("::")[-1]] = status


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _criteria.items():
        terminalreporter.write_line(f"{status:4s}  {name}")
