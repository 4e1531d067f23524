import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from chromoforge.geometry import Conformation  # noqa: E402

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_conformation(rng, bins=8, k=2, replicated=True, spread=3.0):
    par = spread * rng.standard_normal((bins, k, 3))
    rep = spread * rng.standard_normal((bins, k, 3))
    if replicated:
        mask = np.zeros((bins, k))
        n = int(rng.integers(0, bins * k + 1))
        mask.reshape(-1)[:n] = 1
    else:
        mask = np.zeros((bins, k))
    return Conformation(par, rep * mask[..., None], np.ones((bins, k)), mask)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance reporting

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    ok = rep.passed and rep.when == "call"
    _criteria[mark.args[0]] = _criteria.get(mark.args[0], True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _criteria.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
