import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, shape=(16, 16, 3)):
    return rng.uniform(0.0, 1.0, size=shape)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, passed, detail in sorted(RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {num:2d}: {detail}")
