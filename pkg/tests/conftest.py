import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rebatelab.model import APPLE, MarketState

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def params():
    return APPLE


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_state(**kw):
    base = dict(t=0.0, x1=0.0, x2=0.0, x3=APPLE.P0_star, x4=0.0, x5=0.0, x6=0.0, x7=0.0,
                p_p=APPLE.P0_star, p_q=APPLE.P0_star, r1=1.0, r2=1.0)
    base.update(kw)
    return MarketState(**base)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
