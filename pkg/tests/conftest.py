"""Shared, session-cached games and solves."""
import time

import numpy as np
import pytest

from robustcomm.gridworld import build_three_agent_navigation, build_two_agent_navigation
from robustcomm.markov_game import prepare
from robustcomm.occupancy import policy_from_occupancy, solve_baseline_lp
from robustcomm.synthesis import SynthesisConfig, synthesize_min_dependency

_CACHE = {}
SECONDS = {}          # wall time of each cached computation
ACCEPTANCE_LINES = []


def _cached(key, fn):
    if key not in _CACHE:
        t0 = time.perf_counter()
        _CACHE[key] = fn()
        SECONDS[key] = time.perf_counter() - t0
    return _CACHE[key]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def _game(n):
    build = build_two_agent_navigation if n == 2 else build_three_agent_navigation
    return _cached(("game", n), lambda: prepare(build()))


def _baseline(n):
    g = _game(n)

    def solve():
        res = solve_baseline_lp(g)
        return res, policy_from_occupancy(g, res.x)
    return _cached(("lp", n), solve)


def _md(n):
    iters = 100 if n == 2 else 50
    g = _game(n)
    return _cached(("md", n), lambda: synthesize_min_dependency(g, SynthesisConfig(max_iters=iters)))


@pytest.fixture(scope="session")
def game2():
    return _game(2)


@pytest.fixture(scope="session")
def game3():
    return _game(3)


@pytest.fixture(scope="session")
def baseline2():
    return _baseline(2)


@pytest.fixture(scope="session")
def baseline3():
    return _baseline(3)


@pytest.fixture(scope="session")
def md2():
    return _md(2)


@pytest.fixture(scope="session")
def md3():
    return _md(3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
