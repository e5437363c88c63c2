import pathlib
import time

import pytest

from misc.invariance import (LinearSystem, build_atlas, load_atlas, save_atlas,
                             system_environment_hash)
from misc.world import Box, Environment, default_environment

DATA = pathlib.Path(__file__).parent / "data"


def cached_atlas(env, cache_name: str):
    """Build (or reuse a cached copy of) a certified atlas for `env`.

    The cache is keyed by the system/environment digest, so a stale file is
    rebuilt rather than trusted.
    """
    sys = LinearSystem.from_environment(env)
    expected = system_environment_hash(sys, env)
    path = DATA / cache_name
    if path.exists():
        atlas = load_atlas(path)
        if atlas.system_hash == expected:
            return atlas
    atlas = build_atlas(sys, env)
    DATA.mkdir(exist_ok=True)
    save_atlas(atlas, path)
    return atlas


@pytest.fixture(scope="session")
def default_env():
    return default_environment()


@pytest.fixture(scope="session")
def default_atlas(default_env):
    return cached_atlas(default_env, "default.cis.json")


def toy_environment() -> Environment:
    """One free-standing obstacle; all four faces admit non-empty regions."""
    return Environment(
        workspace=Box(0.0, 40.0, 0.0, 40.0),
        obstacles=(Box(15.0, 25.0, 15.0, 25.0),),
        goals=((35.0, 35.0),),
        goal_radius=2.15,
        start=(5.0, 5.0),
        agent_radius=1.2,
        vmax=20.0,
        amax=40.0,
        goal_speed_max=0.9,
    )


@pytest.fixture(scope="session")
def toy_env():
    return toy_environment()


@pytest.fixture(scope="session")
def toy_atlas(toy_env):
    return cached_atlas(toy_env, "toy.cis.json")


@pytest.fixture(scope="session")
def soak_run(default_env, default_atlas):
    """10,000-tick adversarial soak with assist on, shared across acceptance
    tests; also records per-tick telemetry beyond the 30 Hz frames."""
    from misc.safety_filter import SharedControlFilter
    from misc.world import AdversarialUser, GameSession

    controller = SharedControlFilter(default_env, default_atlas)
    session = GameSession(default_env, assist=True, controller=controller,
                          max_ticks=10_000)
    policy = AdversarialUser()
    policy.reset(7)
    ticks = []
    t_start = time.perf_counter()
    while not session.done:
        pre = session.state.copy()
        session.advance(policy)
        post = session.state.copy()
        ticks.append((pre, post, session.u_user.copy(),
                      session.interventions[-1], session.last_solve_ms))
    wall_s = time.perf_counter() - t_start
    return {
        "metrics": session.metrics(),
        "frames": session.frames,
        "ticks": ticks,
        "controller": controller,
        "env": default_env,
        "wall_s": wall_s,
    }
