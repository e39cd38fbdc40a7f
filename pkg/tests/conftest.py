import numpy as np
import pytest

from battshare import UserModel
from battshare import battery as _battery

# Every BatteryDist built during the session, for the empty-battery sandwich
# acceptance check.
EXACT_SOLVES = []
ACCEPTANCE_LINES = []

_orig_init = _battery.BatteryDist.__init__


def _recording_init(self, *args, **kwargs):
    _orig_init(self, *args, **kwargs)
    EXACT_SOLVES.append(self)


_battery.BatteryDist.__init__ = _recording_init


def pytest_collection_modifyitems(session, config, items):
    # The sandwich criterion inspects every exact solve, so it runs last.
    last = [it for it in items if it.get_closest_marker("runs_last")]
    items[:] = [it for it in items if it not in last] + last


def pytest_configure(config):
    config.addinivalue_line("markers", "runs_last: run after all other tests")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_e2(scale=1):
    return UserModel([[0.4, 0.6], [0.4, 0.6]], [-scale, scale], states=["D", "S"])


@pytest.fixture
def e2():
    return make_e2()


@pytest.fixture
def e2_scaled():
    return make_e2(2)


def random_model(rng, n, positive_drift=True, max_reward=3):
    """Random valid chain with nonzero integer rewards."""
    while True:
        P = rng.dirichlet(np.ones(n), size=n) + np.eye(n) * rng.uniform(0.05, 0.5)
        P /= P.sum(axis=1, keepdims=True)
        r = rng.choice([k for k in range(-max_reward, max_reward + 1) if k], size=n)
        if not np.any(r < 0):
            continue
        pi = np.linalg.matrix_power(P, 4096)[0]
        if positive_drift and pi @ r <= 0.05:
            continue
        return UserModel(P, r)
