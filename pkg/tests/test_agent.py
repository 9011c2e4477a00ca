import math

import numpy as np
import pytest

from ploff.agent import (
    AgentOptimizers,
    AgentTrainConfig,
    MetricBonus,
    ZeroBonus,
    actor_objective_and_grads,
    compute_critic_target,
    critic_value,
    evaluate_policy,
    hyperparameter_sweep,
    init_agent,
    load_agent,
    policy,
    save_agent,
    train_agent,
    update_agent_targets,
)
from ploff.data import sample_batch, scripted_returns
from ploff.errors import DivergenceError, ValidationError
from ploff.neighbors import BonusSpec, build_neighbor_index, identity_embedders
from ploff.seeding import substream
from ploff.verify import finite_difference_grads, max_relative_error

from conftest import make_random_dataset

BOX = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))


class ConstantBonus:
    """Stub evaluator so target arithmetic can be checked in isolation."""

    def __init__(self, c):
        self.c = c

    def value(self, s, a, cand_ids=None, q_min=None):
        return np.full(len(s), self.c)

    def value_and_grad(self, s, a, cand_ids=None):
        return np.full(len(s), self.c), np.zeros_like(a)

    def dataset_candidates(self, dataset):
        return None, None


@pytest.fixture
def small_agent():
    cfg = AgentTrainConfig(hidden_dim=8, seed=2)
    return init_agent(4, 2, BOX, cfg)


def test_critic_target_arithmetic(small_agent, medium_dataset):
    batch = sample_batch(medium_dataset, 16, substream(3, "b"))
    batch.done[:4] = 1.0  # force a mix of terminal and regular rows

    y, mean_b = compute_critic_target(small_agent, batch, ConstantBonus(0.2), alpha_c=1.5)
    a_next = policy(small_agent, batch.s_next, target=True)
    q_min = np.minimum(
        critic_value(small_agent.critic1_target, batch.s_next, a_next),
        critic_value(small_agent.critic2_target, batch.s_next, a_next),
    )
    want = batch.r + (1.0 - batch.done) * small_agent.gamma * q_min + 1.5 * 0.2
    assert np.array_equal(y, want)
    assert mean_b == pytest.approx(0.2)

    # done rows drop the discounted term but keep the full bonus
    assert y[0] == pytest.approx(batch.r[0] + 1.5 * 0.2, abs=1e-15)
    # alpha_c = 0 skips the bonus entirely
    y0, mean0 = compute_critic_target(small_agent, batch, ConstantBonus(0.2), alpha_c=0.0)
    assert np.array_equal(y0, batch.r + (1.0 - batch.done) * small_agent.gamma * q_min)
    assert mean0 == 0.0


def test_single_critic_target_uses_first_critic_only(small_agent, medium_dataset):
    batch = sample_batch(medium_dataset, 8, substream(4, "b"))
    y, _ = compute_critic_target(small_agent, batch, ZeroBonus(), alpha_c=0.0, single_critic=True)
    a_next = policy(small_agent, batch.s_next, target=True)
    q1 = critic_value(small_agent.critic1_target, batch.s_next, a_next)
    assert np.array_equal(y, batch.r + (1.0 - batch.done) * small_agent.gamma * q1)


def test_target_policy_noise_is_clipped_and_seeded(small_agent, medium_dataset):
    batch = sample_batch(medium_dataset, 8, substream(5, "b"))
    y1, _ = compute_critic_target(
        small_agent, batch, ZeroBonus(), 0.0, rng=substream(6, "n"),
        target_policy_noise=0.3, target_noise_clip=0.1,
    )
    y2, _ = compute_critic_target(
        small_agent, batch, ZeroBonus(), 0.0, rng=substream(6, "n"),
        target_policy_noise=0.3, target_noise_clip=0.1,
    )
    assert np.array_equal(y1, y2)
    with pytest.raises(ValidationError):
        compute_critic_target(small_agent, batch, ZeroBonus(), 0.0, target_policy_noise=0.3)


def test_actor_gradients_match_finite_differences(medium_dataset, small_metric):
    idx = build_neighbor_index(small_metric, medium_dataset, 8)
    cfg = AgentTrainConfig(hidden_dim=8, seed=7)
    agent = init_agent(4, 2, BOX, cfg)
    bonus_eval = MetricBonus(idx, small_metric, BonusSpec(beta=0.5), agent)
    s = medium_dataset.s[:5]

    _, grads = actor_objective_and_grads(agent, s, bonus_eval, alpha_a=0.7)
    numeric = finite_difference_grads(
        lambda: actor_objective_and_grads(agent, s, bonus_eval, 0.7)[0],
        agent.actor.params(),
    )
    assert max_relative_error(grads, numeric) <= 1e-3


def test_actor_gradients_without_bonus(small_agent, medium_dataset):
    s = medium_dataset.s[:6]
    _, grads = actor_objective_and_grads(small_agent, s, ZeroBonus(), alpha_a=0.0)
    numeric = finite_difference_grads(
        lambda: actor_objective_and_grads(small_agent, s, ZeroBonus(), 0.0)[0],
        small_agent.actor.params(),
    )
    assert max_relative_error(grads, numeric) <= 1e-3


def test_policy_respects_action_box(small_agent, medium_dataset):
    acts = policy(small_agent, medium_dataset.s[:100])
    assert np.all(acts >= -1.0) and np.all(acts <= 1.0)
    wide = init_agent(4, 2, (np.array([0.0, -3.0]), np.array([2.0, 3.0])), AgentTrainConfig(hidden_dim=8))
    acts = policy(wide, medium_dataset.s[:100])
    assert np.all(acts[:, 0] >= 0.0) and np.all(acts[:, 0] <= 2.0)
    assert np.all(acts[:, 1] >= -3.0) and np.all(acts[:, 1] <= 3.0)


def test_zero_bonus_ploff_matches_td3_off_bitwise(medium_dataset, small_metric):
    idx = build_neighbor_index(small_metric, medium_dataset, 5)
    spec = BonusSpec(alpha_actor=0.0, alpha_critic=0.0)
    base = dict(steps=25, batch=32, hidden_dim=16, seed=9, log_every=5)
    p_ploff, log_p = train_agent(
        medium_dataset, AgentTrainConfig(variant="ploff", bonus=spec, **base),
        metric=small_metric, idx=idx,
    )
    p_td3, log_t = train_agent(medium_dataset, AgentTrainConfig(variant="td3_off", bonus=spec, **base))
    for name in ("actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target"):
        for x, y in zip(getattr(p_ploff, name).params(), getattr(p_td3, name).params()):
            assert np.array_equal(x, y)
    assert log_p.rows() == log_t.rows()


def test_policy_delay_gates_actor_and_targets(medium_dataset):
    cfg = AgentTrainConfig(variant="td3_off", steps=2, batch=16, hidden_dim=8,
                           policy_delay=3, seed=10)
    agent, _ = train_agent(medium_dataset, cfg)
    fresh = init_agent(4, 2, (medium_dataset.a.min(axis=0), medium_dataset.a.max(axis=0)), cfg)
    for x, y in zip(agent.actor.params(), fresh.actor.params()):
        assert np.array_equal(x, y)  # no actor step before step 3
    for x, y in zip(agent.critic1_target.params(), fresh.critic1_target.params()):
        assert np.array_equal(x, y)  # targets move with the actor
    assert not all(
        np.array_equal(x, y) for x, y in zip(agent.critic1.params(), fresh.critic1.params())
    )

    agent3, _ = train_agent(medium_dataset, AgentTrainConfig(
        variant="td3_off", steps=3, batch=16, hidden_dim=8, policy_delay=3, seed=10))
    assert not all(
        np.array_equal(x, y) for x, y in zip(agent3.actor.params(), fresh.actor.params())
    )


def test_divergence_guard_raises(medium_dataset):
    cfg = AgentTrainConfig(variant="td3_off", steps=500, batch=16, hidden_dim=8,
                           learning_rate=1e6, seed=11)
    with pytest.raises(DivergenceError) as err:
        train_agent(medium_dataset, cfg)
    assert err.value.step >= 1
    assert err.value.q_max > 10.0 / (1.0 - cfg.gamma)


def test_training_is_deterministic(medium_dataset):
    cfg = AgentTrainConfig(variant="ploff_l2", steps=12, batch=16, hidden_dim=8,
                           k=4, seed=12, log_every=4,
                           bonus=BonusSpec(form="exp", alpha_actor=0.5, alpha_critic=0.5))
    a1, l1 = train_agent(medium_dataset, cfg)
    a2, l2 = train_agent(medium_dataset, cfg)
    for x, y in zip(a1.actor.params(), a2.actor.params()):
        assert np.array_equal(x, y)
    assert l1.rows() == l2.rows()


def test_action_box_sources(medium_dataset):
    cfg = AgentTrainConfig(variant="td3_off", steps=1, batch=8, hidden_dim=8,
                           action_low=(-2.0, -2.0), action_high=(2.0, 2.0))
    agent, _ = train_agent(medium_dataset, cfg)
    assert agent.action_low.tolist() == [-2.0, -2.0]
    agent2, _ = train_agent(medium_dataset, AgentTrainConfig(
        variant="td3_off", steps=1, batch=8, hidden_dim=8))
    assert np.array_equal(agent2.action_low, medium_dataset.a.min(axis=0))
    assert np.array_equal(agent2.action_high, medium_dataset.a.max(axis=0))


def test_evaluation_protocol(pointmass_env, small_agent):
    r1 = evaluate_policy(pointmass_env, small_agent, episodes=3, seed=5)
    r2 = evaluate_policy(pointmass_env, small_agent, episodes=3, seed=5)
    assert r1 == r2
    rand = scripted_returns(pointmass_env, "random", episodes=3, seed=5).mean()
    exp = scripted_returns(pointmass_env, "expert", episodes=3, seed=5).mean()
    assert r1.reference_random == pytest.approx(rand)
    assert r1.reference_expert == pytest.approx(exp)
    assert r1.normalized_score == pytest.approx((r1.mean_return - rand) / (exp - rand))
    assert len(r1.returns) == 3
    wrong = init_agent(3, 2, BOX, AgentTrainConfig(hidden_dim=8))
    with pytest.raises(ValidationError):
        evaluate_policy(pointmass_env, wrong, episodes=1)


def test_sweep_ranks_diverged_runs_last(pointmass_env, medium_dataset):
    base = AgentTrainConfig(
        variant="ploff_l2", steps=6, batch=16, hidden_dim=8, k=4, seed=13,
        bonus=BonusSpec(form="one_minus_exp", beta=0.5, alpha_actor=0.0, alpha_critic=0.0),
    )
    # the huge critic coefficient drives |y| past the guard immediately
    grid = [(0.0, 0.0, 0.5), (0.0, 1e9, 5.0)]
    rows = hyperparameter_sweep(medium_dataset, None, None, grid, base, pointmass_env, eval_episodes=2)
    assert len(rows) == 2
    assert rows[0].alpha_c == 0.0 and math.isfinite(rows[0].normalized_score)
    assert rows[1].normalized_score == -math.inf
    assert math.isnan(rows[1].mean_return)
    with pytest.raises(ValidationError):
        hyperparameter_sweep(medium_dataset, None, None, [], base, pointmass_env)


def test_agent_checkpoint_round_trip(tmp_path, small_agent, medium_dataset):
    for name in ("actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target"):
        for p in getattr(small_agent, name).params():
            p[:] = p.astype(np.float32)
    path = tmp_path / "a.plck"
    save_agent(str(path), small_agent, extra_meta={"variant": "ploff"})
    loaded, header = load_agent(str(path))
    assert header["variant"] == "ploff"
    s = medium_dataset.s[:7]
    assert np.array_equal(policy(small_agent, s), policy(loaded, s))
    assert np.array_equal(loaded.action_low, small_agent.action_low)
    assert loaded.gamma == small_agent.gamma

    from ploff.io import save_checkpoint

    bad = tmp_path / "bad.plck"
    save_checkpoint(bad, {"kind": "metric-embedders"}, {"w": np.zeros((2, 2))})
    with pytest.raises(ValidationError):
        load_agent(str(bad))


def test_config_validation(medium_dataset):
    with pytest.raises(ValidationError):
        AgentTrainConfig(variant="ddpg")
    with pytest.raises(ValidationError):
        AgentTrainConfig(policy_delay=0)
    with pytest.raises(ValidationError):
        AgentTrainConfig(target_policy_noise=-0.1)
    with pytest.raises(ValidationError):
        train_agent(medium_dataset, AgentTrainConfig(variant="ploff", steps=1, hidden_dim=8))
    unscaled = make_random_dataset(n=20, seed=14, scaled=False)
    with pytest.raises(ValidationError):
        train_agent(unscaled, AgentTrainConfig(variant="td3_off", steps=1, hidden_dim=8))


def test_target_update_moves_toward_online(small_agent):
    before = [p.copy() for p in small_agent.critic1_target.params()]
    for p in small_agent.critic1.params():
        p += 1.0
    update_agent_targets(small_agent, 0.5)
    for got, old, new in zip(
        small_agent.critic1_target.params(), before, small_agent.critic1.params()
    ):
        assert np.allclose(got, 0.5 * new + 0.5 * old, atol=1e-15)


def test_bonus_evaluator_candidate_tables(medium_dataset, small_metric):
    idx = build_neighbor_index(small_metric, medium_dataset, 6)
    agent = init_agent(4, 2, BOX, AgentTrainConfig(hidden_dim=8))
    mb = MetricBonus(idx, small_metric, BonusSpec(), agent)
    cand_s, cand_next = mb.dataset_candidates(medium_dataset)
    assert cand_s is idx.neighbor_ids
    assert cand_next.shape == (medium_dataset.n, 6)
    assert ZeroBonus().dataset_candidates(medium_dataset) == (None, None)
    short = make_random_dataset(n=5, state_dim=4, action_dim=2, seed=15)
    with pytest.raises(ValidationError):
        mb.dataset_candidates(short)
