import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from fova.mdp import MdpSpec, TabularPolicy, make_gridworld, make_random_mdp, softmax

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def chain():
    """Two-cell chain: start cell 0, absorbing goal cell 1 paying 1 per step."""
    return make_gridworld(2, 1, 0.0, 1.0, 0.9)


@pytest.fixture
def grid4():
    return make_gridworld(4, 4, 0.1, 10.0, 0.9)


def absorbing(reward=1.0, gamma=0.9):
    return MdpSpec(1, 1, np.ones((1, 1, 1)), np.array([[reward]]), abs(reward) or 1.0, gamma, np.ones(1))


def random_policy(rng, n_states, n_actions, scale=1.0):
    return TabularPolicy(softmax(scale * rng.normal(size=(n_states, n_actions))))


@st.composite
def mdp_and_policy(draw, max_states=5, max_actions=4):
    n_s = draw(st.integers(1, max_states))
    n_a = draw(st.integers(1, max_actions))
    seed = draw(st.integers(0, 2**31 - 1))
    gamma = draw(st.sampled_from([0.5, 0.9, 0.95]))
    mdp = make_random_mdp(n_s, n_a, gamma, 1.0, seed)
    rng = np.random.default_rng(seed + 1)
    return mdp, random_policy(rng, n_s, n_a, 2.0)


VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Print one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        VERDICTS.append(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
