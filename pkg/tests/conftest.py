import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "stuq",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("stuq")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):  # keys are zero-padded, e.g. "08.iii"
        terminalreporter.write_line(ACCEPTANCE[key])
