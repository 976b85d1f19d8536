import sys

import numpy as np
import pytest
from hypothesis import settings

from mapcal.noise import fit_default_locobot_like, random_stream
from mapcal.policy import forward_policy_step
from mapcal.selfsup import collect_trajectory
from mapcal.world import EnvSpec, generate_environment

settings.register_profile("repo", deadline=None, max_examples=50)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def env():
    return generate_environment(0, EnvSpec())


@pytest.fixture(scope="session")
def clean_traj(env):
    act, odo = fit_default_locobot_like("clean")
    return collect_trajectory(env, forward_policy_step, 30, act, odo, random_stream(5, 1))


@pytest.fixture(scope="session")
def noisy_traj(env):
    act, odo = fit_default_locobot_like("locobot_like")
    return collect_trajectory(env, forward_policy_step, 30, act, odo, random_stream(5, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
