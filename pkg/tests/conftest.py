import warnings

import numpy as np
import pytest

from adaptkkt.kkt import Discretization
from adaptkkt.problems import DesignWarning, ElectrodeProblem, SlitProblem


@pytest.fixture(autouse=True)
def _quiet_design_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DesignWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def slit_linear():
    return SlitProblem("linear")


@pytest.fixture(scope="session")
def slit_disc(slit_linear):
    return Discretization(slit_linear, slit_linear.coarse_mesh())


@pytest.fixture(scope="session")
def electrode():
    return ElectrodeProblem()


@pytest.fixture(scope="session")
def electrode_disc(electrode):
    return Discretization(electrode, electrode.coarse_mesh())


# --------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion


def pytest_configure(config):
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    k = marker.args[0]
    details = [v for name, v in item.user_properties if name == "detail"]
    entry = item.config._criteria.setdefault(k, {"ok": True, "lines": []})
    entry["ok"] &= rep.passed
    entry["lines"].append(f"{item.name}: {rep.outcome}" + (f" ({'; '.join(details)})" if details else ""))


def pytest_terminal_summary(terminalreporter, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(crit):
        entry = crit[k]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"{status} criterion {k}: " + " | ".join(entry["lines"]))
