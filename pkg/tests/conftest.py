import os
import sys

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from parabolic_mc.recipes import train_recipe


# trained models are shared across test modules; each recipe trains once per session
@pytest.fixture(scope="session")
def constant_ngo():
    return train_recipe("ngo_constant_1d")


@pytest.fixture(scope="session")
def polynomial_ngo():
    return train_recipe("ngo_polynomial_1d")


@pytest.fixture(scope="session")
def linear_ngo_1d():
    return train_recipe("ngo_linear_1d")


@pytest.fixture(scope="session")
def linear_ngo_10d():
    return train_recipe("ngo_linear_10d")


@pytest.fixture(scope="session")
def hjb_ngo_10d():
    return train_recipe("ngo_hjb_10d")


@pytest.fixture(scope="session")
def bsb_ngo_2d():
    return train_recipe("ngo_bsb_2d")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results, key=lambda n: int(n.split()[0])):
        terminalreporter.write_line(results[name].line())
