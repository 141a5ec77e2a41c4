"""Shared fixtures: small architectures, scripted episodes, calibrations."""

import numpy as np
import pytest

from safegrasp.policy import FlowPolicy, Observation, PolicyDims
from safegrasp.rewards import calibrate
from safegrasp.sim import SimConfig, gen_dataset
from safegrasp.tactile import TactileFrame


@pytest.fixture(scope="session")
def small_dims():
    # small enough that finite differences stay cheap
    return PolicyDims(horizon=4, action_dim=3, cond_dim=5, latent_dim=8,
                      tactile_embed_dim=16, enc_hidden=12, vf_hidden=16,
                      grid_h=4, grid_w=4, tactile=True)


@pytest.fixture(scope="session")
def small_proprio_dims(small_dims):
    from safegrasp.policy import student_dims
    return student_dims(small_dims)


@pytest.fixture
def small_policy(small_dims):
    return FlowPolicy.initialize(small_dims, seed=123)


def random_observation(dims, rng):
    tactile = None
    if dims.tactile:
        tactile = TactileFrame(
            left=rng.random((dims.grid_h, dims.grid_w)),
            right=rng.random((dims.grid_h, dims.grid_w)),
            gripper_closed=True, timestep=0)
    return Observation(cond=rng.standard_normal(dims.cond_dim),
                       proprio=rng.standard_normal(dims.action_dim),
                       tactile=tactile)


@pytest.fixture
def make_observation():
    return random_observation


@pytest.fixture(scope="session")
def demo_episodes():
    """A small mixed batch of scripted episodes on the default bench."""
    cfg = SimConfig()
    return gen_dataset(cfg, {"clean": 8, "over_force": 4, "weak_grip": 3},
                       seed=5)


@pytest.fixture(scope="session")
def demo_calibration(demo_episodes):
    return calibrate(demo_episodes)
