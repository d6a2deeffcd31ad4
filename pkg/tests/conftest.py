import numpy as np
import pytest

from gpmpc.quad_core import QuadParams
from gpmpc.quaternion import quat_canonical, quat_normalize

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def params():
    return QuadParams()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_states(rng, n, p_range=5.0, v_range=10.0, w_range=3.0):
    """Random flat 13-states with unit quaternions, shape (n, 13)."""
    x = np.zeros((n, 13))
    x[:, 0:3] = rng.uniform(-p_range, p_range, (n, 3))
    x[:, 3:7] = quat_canonical(quat_normalize(rng.standard_normal((n, 4))))
    x[:, 7:10] = rng.uniform(-v_range, v_range, (n, 3))
    x[:, 10:13] = rng.uniform(-w_range, w_range, (n, 3))
    return x
