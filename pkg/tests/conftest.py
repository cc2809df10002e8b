import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture(scope="session")
def world():
    from hpcalign.gridhome import default_world

    return default_world()


@pytest.fixture(scope="session")
def noisy_trajs(world):
    """A small mixed corpus of noisy rollouts, reused across modules."""
    from hpcalign.gridhome import get_task, inject_noise, oracle_policy, rollout

    pol = inject_noise(oracle_policy(world), 0.2, persistence=0.6, world=world)
    return [rollout(pol, get_task(t, world), s, world=world).trajectory
            for t in ("fridge_milk", "breakfast", "wash_dry") for s in range(2)]
