import functools

import numpy as np
import pytest

from shieldcraft.envmodel import ENV_NAMES, make_env
from shieldcraft.shield import initial_shield
from shieldcraft.verifier import safe_space


@functools.lru_cache(maxsize=None)
def shipped(name):
    """(env, g0, phi0) for a benchmark, computed once per session."""
    env = make_env(name)
    g = initial_shield(name)
    return env, g, safe_space(env, g)


@pytest.fixture(params=ENV_NAMES)
def env_name(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@functools.lru_cache(maxsize=None)
def lifted(name, seed=0):
    """A blended policy whose network imitates the shipped shield."""
    from shieldcraft.blend import lift

    env, g, phi = shipped(name)
    return env, lift(g, phi, env, np.random.default_rng(seed))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
