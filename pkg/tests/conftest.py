import numpy as np
import pytest

from ploff.data import TransitionDataset, collect_scripted_dataset, scale_rewards
from ploff.envs import box_space, build_pointmass, random_mdp
from ploff.metric import MetricTrainConfig, train_metric
from ploff.seeding import substream


@pytest.fixture(scope="session")
def pointmass_env():
    return build_pointmass()


@pytest.fixture(scope="session")
def medium_dataset(pointmass_env):
    """Small narrow-coverage dataset shared by neighbor/agent/figure tests."""
    ds = collect_scripted_dataset(pointmass_env, "medium", episodes=20, seed=7, noise_scale=0.1)
    return scale_rewards(ds)


@pytest.fixture(scope="session")
def small_metric(pointmass_env, medium_dataset):
    """A briefly trained metric; tests only rely on structural properties."""
    cfg = MetricTrainConfig(
        action_space=box_space(pointmass_env.action_low, pointmass_env.action_high),
        steps=200,
        batch=64,
        n_action_samples=8,
        hidden_dim=32,
        embed_dim=8,
        seed=3,
    )
    pair, _ = train_metric(medium_dataset, cfg)
    return pair


def make_random_dataset(n=60, state_dim=3, action_dim=2, seed=0, env_id="test-random", scaled=True):
    rng = substream(seed, "test-random-dataset")
    return TransitionDataset(
        env_id=env_id,
        state_dim=state_dim,
        action_dim=action_dim,
        s=rng.standard_normal((n, state_dim)),
        a=rng.standard_normal((n, action_dim)),
        r=rng.uniform(0.0, 1.0, n),
        s_next=rng.standard_normal((n, state_dim)),
        done=np.zeros(n, dtype=bool),
        reward_min=0.0 if scaled else None,
        reward_max=1.0 if scaled else None,
        scaled=scaled,
    )


@pytest.fixture
def random_small_mdp():
    return random_mdp(5, 3, substream(11, "test-small-mdp"), terminal_frac=0.2)
