import functools
import math

import numpy as np
import pytest

from iontransport import _backend
from iontransport import waveform_synth as ws
from iontransport.constants import DEFAULT_CONSTANTS
from iontransport.trap_model import ElectrodeBasis

TWO_PI = 2 * math.pi


def pytest_report_header(config):
    return f"iontransport trajectory kernel: {_backend.NAME}"


# -- acceptance summary ---------------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    results = item.config._acceptance.setdefault(number, {"title": title, "outcomes": []})
    results["outcomes"].append(report.passed)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        verdict = "PASS" if entry["outcomes"] and all(entry["outcomes"]) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {entry['title']}")


@pytest.fixture(scope="session")
def basis():
    return ElectrodeBasis.default()


@pytest.fixture(scope="session")
def constants():
    return DEFAULT_CONSTANTS


# bound here so that tests patching the module attribute still reach the solver
_synth_separation = ws.synth_separation


@functools.lru_cache(maxsize=None)
def _separation(ramp):
    return _synth_separation(ElectrodeBasis.default(), ramp)


@pytest.fixture(scope="session")
def separation():
    """Memoised ``synth_separation`` on the default basis, keyed by ramp."""
    return _separation


@pytest.fixture(scope="session")
def default_separation(separation):
    return separation(ws.SeparationRamp())


@pytest.fixture
def rng():
    return np.random.default_rng(20260418)
