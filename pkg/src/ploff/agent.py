"""Bonus-regularized deterministic actor-critic for offline datasets.

Twin critics regress to y = r + (1 - done) * gamma * min(Q1bar, Q2bar) at
(s', pi_bar(s')) plus alpha_c times the lookup bonus there (the bonus term
is deliberately not discounted and not done-masked). The actor, updated
every policy_delay critic steps together with all target nets, ascends
Q1(s, pi(s)) + alpha_a * bonus(s, pi(s)).

Variants: ploff (metric bonus), td3_off (no bonus), ploff_l2 (bonus from
raw Euclidean distances via identity embedders). With both coefficients
zero, ploff takes bitwise the same steps as td3_off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TransitionBatch, TransitionDataset, sample_batch, scripted_returns
from .envs import ContinuousEnv
from .errors import DivergenceError, NonFiniteError, ValidationError
from .io import load_checkpoint, save_checkpoint
from .metric import EmbedderPair
from .neighbors import (
    BonusSpec,
    NeighborIndex,
    bonus_action_grad,
    bonus_from_distance,
    build_neighbor_index,
    identity_embedders,
    projection_distance,
    projection_distance_action_grad,
    query_candidates_batch,
)
from .nets import Adam, Mlp, backward, forward, init_mlp, mlp_from_tensors, mlp_tensors, polyak_update
from .seeding import substream

ACTOR_ACTIVATIONS = ("tanh", "elu", "tanh")
CRITIC_ACTIVATIONS = ("tanh", "elu", "identity")
VARIANTS = ("ploff", "td3_off", "ploff_l2")


@dataclass
class AgentParams:
    """Actor, twin critics, their targets, and the action box."""

    actor: Mlp
    critic1: Mlp
    critic2: Mlp
    actor_target: Mlp
    critic1_target: Mlp
    critic2_target: Mlp
    action_low: np.ndarray
    action_high: np.ndarray
    gamma: float = 0.99
    tau: float = 0.005

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValidationError("gamma must be in [0, 1)")
        if np.any(self.action_low > self.action_high):
            raise ValidationError("action box low bound exceeds high bound")

    @property
    def state_dim(self) -> int:
        return self.actor.in_dim

    @property
    def action_dim(self) -> int:
        return self.actor.out_dim


@dataclass(frozen=True)
class AgentTrainConfig:
    bonus: BonusSpec = BonusSpec()
    variant: str = "ploff"
    steps: int = 500_000
    batch: int = 256
    policy_delay: int = 2
    learning_rate: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    hidden_dim: int = 256
    seed: int = 0
    k: int = 50  # candidate count for the internally built ploff_l2 index
    single_critic: bool = False
    target_policy_noise: float = 0.0
    target_noise_clip: float = 0.5
    log_every: int = 1000
    # Environment action bounds; None falls back to the dataset's bounds.
    action_low: tuple[float, ...] | None = None
    action_high: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        for name in ("batch", "policy_delay", "learning_rate", "hidden_dim", "k", "log_every"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not (0.0 <= self.gamma < 1.0):
            raise ValidationError("gamma must be in [0, 1)")
        if self.target_policy_noise < 0 or self.target_noise_clip < 0:
            raise ValidationError("noise settings must be >= 0")


def init_agent(
    state_dim: int,
    action_dim: int,
    action_box: tuple[np.ndarray, np.ndarray],
    cfg: AgentTrainConfig,
) -> AgentParams:
    """Independent deterministic inits for actor and both critics."""
    if state_dim < 1 or action_dim < 1:
        raise ValidationError("dims must be positive")
    h = cfg.hidden_dim
    actor = init_mlp((state_dim, h, h, action_dim), ACTOR_ACTIVATIONS, substream(cfg.seed, "actor-init"))
    critic1 = init_mlp((state_dim + action_dim, h, h, 1), CRITIC_ACTIVATIONS, substream(cfg.seed, "critic1-init"))
    critic2 = init_mlp((state_dim + action_dim, h, h, 1), CRITIC_ACTIVATIONS, substream(cfg.seed, "critic2-init"))
    low = np.asarray(action_box[0], dtype=np.float64)
    high = np.asarray(action_box[1], dtype=np.float64)
    if low.shape != (action_dim,) or high.shape != (action_dim,):
        raise ValidationError("action box must match action_dim")
    return AgentParams(
        actor=actor,
        critic1=critic1,
        critic2=critic2,
        actor_target=actor.copy(),
        critic1_target=critic1.copy(),
        critic2_target=critic2.copy(),
        action_low=low,
        action_high=high,
        gamma=cfg.gamma,
        tau=cfg.tau,
    )


def _box_scale(agent: AgentParams) -> tuple[np.ndarray, np.ndarray]:
    center = (agent.action_low + agent.action_high) / 2.0
    half = (agent.action_high - agent.action_low) / 2.0
    return center, half


def policy(agent: AgentParams, s: np.ndarray, target: bool = False) -> np.ndarray:
    """Deterministic actions in the box for a batch of states."""
    net = agent.actor_target if target else agent.actor
    center, half = _box_scale(agent)
    out, _ = forward(net, s)
    return center + half * out


def critic_value(net: Mlp, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    q, _ = forward(net, np.concatenate([s, a], axis=1))
    return q[:, 0]


def critic_value_and_action_grad(net: Mlp, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Q values and dQ/da (unweighted)."""
    x = np.concatenate([s, a], axis=1)
    q, cache = forward(net, x)
    _, grad_in = backward(net, cache, np.ones_like(q))
    return q[:, 0], grad_in[:, s.shape[1] :]


class ZeroBonus:
    """Bonus of the no-bonus ablation."""

    def value(self, s: np.ndarray, a: np.ndarray, cand_ids=None, q_min=None) -> np.ndarray:
        return np.zeros(len(s))

    def value_and_grad(self, s: np.ndarray, a: np.ndarray, cand_ids=None) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(len(s)), np.zeros_like(a)

    def dataset_candidates(self, dataset: TransitionDataset):
        return None, None


class MetricBonus:
    """Lookup bonus bound to an index, an embedder, and the agent's targets.

    The critic factor of the q_scaled_exp form reads the minimum of the twin
    target critics (the same quantity the TD target trusts).
    """

    def __init__(
        self,
        idx: NeighborIndex,
        pair: EmbedderPair,
        spec: BonusSpec,
        agent: AgentParams,
        single_critic: bool = False,
    ):
        self.idx = idx
        self.pair = pair
        self.spec = spec
        self.agent = agent
        self.single_critic = single_critic

    def _q_min(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        q1 = critic_value(self.agent.critic1_target, s, a)
        if self.single_critic:
            return q1
        return np.minimum(q1, critic_value(self.agent.critic2_target, s, a))

    def _q_min_grad(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self._q_min_and_grad(s, a)[1]

    def _q_min_and_grad(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q1, g1 = critic_value_and_action_grad(self.agent.critic1_target, s, a)
        if self.single_critic:
            return q1, g1
        q2, g2 = critic_value_and_action_grad(self.agent.critic2_target, s, a)
        return np.minimum(q1, q2), np.where((q1 <= q2)[:, None], g1, g2)

    def value(self, s: np.ndarray, a: np.ndarray, cand_ids=None, q_min=None) -> np.ndarray:
        """Bonus values; q_min short-circuits the critic forward when the
        caller already holds min(Q1_target, Q2_target) at (s, a)."""
        d = projection_distance(self.idx, self.pair, s, a, cand_ids)
        q = None
        if self.spec.form == "q_scaled_exp":
            q = self._q_min(s, a) if q_min is None else q_min
        return bonus_from_distance(self.spec, d, q)

    def value_and_grad(self, s: np.ndarray, a: np.ndarray, cand_ids=None) -> tuple[np.ndarray, np.ndarray]:
        if self.spec.form != "q_scaled_exp":
            return bonus_action_grad(self.idx, self.pair, self.spec, s, a, cand_ids=cand_ids)
        # One critic pass supplies both the scale factor and its gradient.
        d, dd_da = projection_distance_action_grad(self.idx, self.pair, s, a, cand_ids)
        decay = np.exp(-self.spec.beta * d)
        q, dq_da = self._q_min_and_grad(s, a)
        val = q * decay
        grad = dq_da * decay[:, None] + (q * -self.spec.beta * decay)[:, None] * dd_da
        return val, grad

    def dataset_candidates(self, dataset: TransitionDataset):
        """Candidate tables for every dataset s and s_next row.

        Training queries the bonus only at dataset states, so the lookups
        can happen once up front; neighbor_ids already covers the s side by
        construction.
        """
        if dataset.n != self.idx.n:
            raise ValidationError("index row count does not match the dataset")
        return self.idx.neighbor_ids, query_candidates_batch(self.idx, dataset.s_next)


def compute_critic_target(
    agent: AgentParams,
    batch: TransitionBatch,
    bonus_eval,
    alpha_c: float,
    rng: np.random.Generator | None = None,
    single_critic: bool = False,
    target_policy_noise: float = 0.0,
    target_noise_clip: float = 0.5,
    cand_ids: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Regression target y and the batch-mean bonus (for logging).

    Only target networks contribute, so y is a constant for the critic step.
    """
    a_next = policy(agent, batch.s_next, target=True)
    if target_policy_noise > 0.0:
        if rng is None:
            raise ValidationError("target policy noise requires an rng")
        noise = np.clip(
            target_policy_noise * rng.standard_normal(a_next.shape),
            -target_noise_clip,
            target_noise_clip,
        )
        a_next = np.clip(a_next + noise, agent.action_low, agent.action_high)
    q1 = critic_value(agent.critic1_target, batch.s_next, a_next)
    q_min = q1 if single_critic else np.minimum(q1, critic_value(agent.critic2_target, batch.s_next, a_next))
    y = batch.r + (1.0 - batch.done) * agent.gamma * q_min
    mean_bonus = 0.0
    if alpha_c != 0.0:
        # q_min is exactly the critic factor a scaled bonus would recompute.
        b = bonus_eval.value(batch.s_next, a_next, cand_ids, q_min=q_min)
        y = y + alpha_c * b
        mean_bonus = float(np.mean(b))
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("non-finite critic target")
    return y, mean_bonus


@dataclass
class CriticStepInfo:
    loss: float
    q_abs_max: float
    mean_bonus: float


def _critic_regression_step(net: Mlp, opt: Adam, s: np.ndarray, a: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    x = np.concatenate([s, a], axis=1)
    q, cache = forward(net, x)
    err = q[:, 0] - y
    loss = float(np.mean(err * err))
    grads, _ = backward(net, cache, (2.0 * err / len(err))[:, None])
    opt.step(net.params(), grads)
    return loss, float(np.max(np.abs(q)))


def critic_update(
    agent: AgentParams,
    opts: "AgentOptimizers",
    batch: TransitionBatch,
    bonus_eval,
    alpha_c: float,
    rng: np.random.Generator | None = None,
    single_critic: bool = False,
    target_policy_noise: float = 0.0,
    target_noise_clip: float = 0.5,
    cand_ids: np.ndarray | None = None,
) -> CriticStepInfo:
    """One squared-error regression step of both critics toward y."""
    y, mean_bonus = compute_critic_target(
        agent,
        batch,
        bonus_eval,
        alpha_c,
        rng=rng,
        single_critic=single_critic,
        target_policy_noise=target_policy_noise,
        target_noise_clip=target_noise_clip,
        cand_ids=cand_ids,
    )
    loss1, qmax1 = _critic_regression_step(agent.critic1, opts.critic1, batch.s, batch.a, y)
    if single_critic:
        return CriticStepInfo(loss=loss1, q_abs_max=max(qmax1, float(np.max(np.abs(y)))), mean_bonus=mean_bonus)
    loss2, qmax2 = _critic_regression_step(agent.critic2, opts.critic2, batch.s, batch.a, y)
    return CriticStepInfo(
        loss=loss1 + loss2,
        q_abs_max=max(qmax1, qmax2, float(np.max(np.abs(y)))),
        mean_bonus=mean_bonus,
    )


def actor_objective_and_grads(
    agent: AgentParams,
    s: np.ndarray,
    bonus_eval,
    alpha_a: float,
    cand_ids: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Mean of Q1(s, pi(s)) + alpha_a * bonus, with gradients on actor params.

    Pure function of the current parameters; train steps negate the grads to
    ascend.
    """
    b = len(s)
    center, half = _box_scale(agent)
    out, cache = forward(agent.actor, s)
    actions = center + half * out

    x = np.concatenate([s, actions], axis=1)
    q, critic_cache = forward(agent.critic1, x)
    _, critic_in_grad = backward(agent.critic1, critic_cache, np.full_like(q, 1.0 / b))
    dj_da = critic_in_grad[:, s.shape[1] :]
    objective = float(np.mean(q[:, 0]))

    if alpha_a != 0.0:
        bval, bgrad = bonus_eval.value_and_grad(s, actions, cand_ids)
        objective += alpha_a * float(np.mean(bval))
        dj_da = dj_da + (alpha_a / b) * bgrad

    grads, _ = backward(agent.actor, cache, dj_da * half)
    return objective, grads


def actor_update(
    agent: AgentParams,
    opts: "AgentOptimizers",
    batch: TransitionBatch,
    bonus_eval,
    alpha_a: float,
    cand_ids: np.ndarray | None = None,
) -> float:
    """Ascend the actor objective once."""
    objective, grads = actor_objective_and_grads(agent, batch.s, bonus_eval, alpha_a, cand_ids)
    opts.actor.step(agent.actor.params(), [-g for g in grads])
    return objective


def update_agent_targets(agent: AgentParams, tau: float) -> AgentParams:
    polyak_update(agent.actor_target, agent.actor, tau)
    polyak_update(agent.critic1_target, agent.critic1, tau)
    polyak_update(agent.critic2_target, agent.critic2, tau)
    return agent


@dataclass
class AgentOptimizers:
    actor: Adam
    critic1: Adam
    critic2: Adam

    @classmethod
    def for_agent(cls, agent: AgentParams, learning_rate: float) -> "AgentOptimizers":
        return cls(
            actor=Adam.for_params(agent.actor.params(), learning_rate),
            critic1=Adam.for_params(agent.critic1.params(), learning_rate),
            critic2=Adam.for_params(agent.critic2.params(), learning_rate),
        )


@dataclass
class AgentTrainLog:
    steps: list[int] = field(default_factory=list)
    critic_loss: list[float] = field(default_factory=list)
    actor_objective: list[float] = field(default_factory=list)
    mean_bonus: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float, float]]:
        return list(zip(self.steps, self.critic_loss, self.actor_objective, self.mean_bonus))


def make_bonus_evaluator(
    dataset: TransitionDataset,
    cfg: AgentTrainConfig,
    agent: AgentParams,
    metric: EmbedderPair | None,
    idx: NeighborIndex | None,
):
    if cfg.variant == "td3_off":
        return ZeroBonus()
    if cfg.variant == "ploff":
        if metric is None or idx is None:
            raise ValidationError("ploff variant needs a trained metric and its index")
        return MetricBonus(idx, metric, cfg.bonus, agent, single_critic=cfg.single_critic)
    ident = identity_embedders(dataset.state_dim, dataset.action_dim)
    l2_idx = build_neighbor_index(ident, dataset, cfg.k)
    return MetricBonus(l2_idx, ident, cfg.bonus, agent, single_critic=cfg.single_critic)


def train_agent(
    dataset: TransitionDataset,
    cfg: AgentTrainConfig,
    metric: EmbedderPair | None = None,
    idx: NeighborIndex | None = None,
) -> tuple[AgentParams, AgentTrainLog]:
    """Offline training loop with the divergence guard.

    Aborts with DivergenceError once any critic magnitude passes
    10 / (1 - gamma); with rewards scaled to [0, 1] a sound run stays far
    below that.
    """
    if not dataset.scaled:
        raise ValidationError("agent training expects a reward-scaled dataset")
    if cfg.action_low is not None and cfg.action_high is not None:
        box = (np.array(cfg.action_low, dtype=np.float64), np.array(cfg.action_high, dtype=np.float64))
    else:
        box = _dataset_action_box(dataset)
    agent = init_agent(dataset.state_dim, dataset.action_dim, box, cfg)
    bonus_eval = make_bonus_evaluator(dataset, cfg, agent, metric, idx)
    opts = AgentOptimizers.for_agent(agent, cfg.learning_rate)
    rng_batch = substream(cfg.seed, "agent-batch")
    rng_noise = substream(cfg.seed, "agent-target-noise")
    guard = 10.0 / (1.0 - cfg.gamma)
    log = AgentTrainLog()
    last_objective = math.nan
    cand_s, cand_next = None, None
    if cfg.bonus.alpha_actor != 0.0 or cfg.bonus.alpha_critic != 0.0:
        cand_s, cand_next = bonus_eval.dataset_candidates(dataset)

    for step in range(1, cfg.steps + 1):
        batch = sample_batch(dataset, cfg.batch, rng_batch)
        info = critic_update(
            agent,
            opts,
            batch,
            bonus_eval,
            cfg.bonus.alpha_critic,
            rng=rng_noise,
            single_critic=cfg.single_critic,
            target_policy_noise=cfg.target_policy_noise,
            target_noise_clip=cfg.target_noise_clip,
            cand_ids=None if cand_next is None else cand_next[batch.rows],
        )
        if info.q_abs_max > guard:
            raise DivergenceError(
                f"critic magnitude {info.q_abs_max:.3e} passed the guard {guard:.3e} at step {step}",
                step=step,
                q_max=info.q_abs_max,
            )
        if step % cfg.policy_delay == 0:
            last_objective = actor_update(
                agent,
                opts,
                batch,
                bonus_eval,
                cfg.bonus.alpha_actor,
                cand_ids=None if cand_s is None else cand_s[batch.rows],
            )
            update_agent_targets(agent, cfg.tau)
        if step % cfg.log_every == 0:
            log.steps.append(step)
            log.critic_loss.append(info.loss)
            log.actor_objective.append(last_objective)
            log.mean_bonus.append(info.mean_bonus)
    return agent, log


def _dataset_action_box(dataset: TransitionDataset) -> tuple[np.ndarray, np.ndarray]:
    """Action bounds for the actor: the smallest box holding the data.

    One-hot datasets produce [0, 1] per coordinate; continuous collectors
    already clip to the environment box, whose corners appear in any
    reasonably sized dataset.
    """
    return dataset.a.min(axis=0), dataset.a.max(axis=0)


@dataclass
class EvalReport:
    mean_return: float
    std_return: float
    normalized_score: float
    returns: tuple[float, ...]
    reference_random: float
    reference_expert: float

    def to_dict(self) -> dict:
        return {
            "mean": self.mean_return,
            "std": self.std_return,
            "normalized": self.normalized_score,
            "returns": list(self.returns),
            "reference_random": self.reference_random,
            "reference_expert": self.reference_expert,
        }


def evaluate_policy(env: ContinuousEnv, agent: AgentParams, episodes: int = 10, seed: int = 0) -> EvalReport:
    """Deterministic rollouts; scores normalized between random and expert.

    The policy and environment are both deterministic, so the seed only
    feeds the stored-reference protocol (random policy rollouts).
    """
    if env.state_dim != agent.state_dim or env.action_dim != agent.action_dim:
        raise ValidationError("environment dims do not match the agent")
    returns = []
    for _ in range(episodes):
        state = env.reset()
        total = 0.0
        for _ in range(env.time_limit):
            action = policy(agent, state[None, :])[0]
            state, reward = env.step(state, action)
            total += reward
        returns.append(total)
    arr = np.array(returns)
    r_random = float(np.mean(scripted_returns(env, "random", episodes=episodes, seed=seed)))
    r_expert = float(np.mean(scripted_returns(env, "expert", episodes=episodes, seed=seed)))
    denom = r_expert - r_random
    if abs(denom) < 1e-12:
        raise ValidationError("reference returns coincide; normalized score undefined")
    mean = float(np.mean(arr))
    return EvalReport(
        mean_return=mean,
        std_return=float(np.std(arr)),
        normalized_score=(mean - r_random) / denom,
        returns=tuple(float(x) for x in arr),
        reference_random=r_random,
        reference_expert=r_expert,
    )


@dataclass
class SweepRow:
    alpha_a: float
    alpha_c: float
    beta: float
    seed: int
    mean_return: float
    normalized_score: float


def hyperparameter_sweep(
    dataset: TransitionDataset,
    metric: EmbedderPair | None,
    idx: NeighborIndex | None,
    grid: list[tuple[float, float, float]],
    cfg_base: AgentTrainConfig,
    env: ContinuousEnv,
    eval_episodes: int = 10,
) -> list[SweepRow]:
    """One training run per (alpha_a, alpha_c, beta), ranked by score.

    Diverged runs are kept in the table, ranked last with -inf score.
    """
    if not grid:
        raise ValidationError("sweep grid must be nonempty")
    rows: list[SweepRow] = []
    for alpha_a, alpha_c, beta in grid:
        spec = replace(cfg_base.bonus, alpha_actor=alpha_a, alpha_critic=alpha_c, beta=beta)
        cfg = replace(cfg_base, bonus=spec)
        try:
            agent, _ = train_agent(dataset, cfg, metric=metric, idx=idx)
        except DivergenceError:
            rows.append(
                SweepRow(alpha_a, alpha_c, beta, cfg.seed, mean_return=math.nan, normalized_score=-math.inf)
            )
            continue
        report = evaluate_policy(env, agent, episodes=eval_episodes, seed=cfg.seed)
        rows.append(
            SweepRow(alpha_a, alpha_c, beta, cfg.seed, report.mean_return, report.normalized_score)
        )
    rows.sort(key=lambda r: r.normalized_score, reverse=True)
    return rows


CHECKPOINT_KIND_AGENT = "agent"
_AGENT_NETS = ("actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target")


def save_agent(path: str, agent: AgentParams, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": CHECKPOINT_KIND_AGENT,
        "state_dim": agent.state_dim,
        "action_dim": agent.action_dim,
        "action_low": [float(x) for x in agent.action_low],
        "action_high": [float(x) for x in agent.action_high],
        "gamma": agent.gamma,
        "tau": agent.tau,
    }
    if extra_meta:
        meta.update(extra_meta)
    tensors: dict[str, np.ndarray] = {}
    for name in _AGENT_NETS:
        tensors.update(mlp_tensors(getattr(agent, name), name))
    save_checkpoint(path, meta, tensors)


def load_agent(path: str) -> tuple[AgentParams, dict]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != CHECKPOINT_KIND_AGENT:
        raise ValidationError(f"not an agent checkpoint: kind={header.get('kind')!r}")
    nets = {}
    for name in _AGENT_NETS:
        acts = ACTOR_ACTIVATIONS if "actor" in name else CRITIC_ACTIVATIONS
        nets[name] = mlp_from_tensors(tensors, name, acts)
    agent = AgentParams(
        action_low=np.array(header["action_low"], dtype=np.float64),
        action_high=np.array(header["action_high"], dtype=np.float64),
        gamma=float(header["gamma"]),
        tau=float(header["tau"]),
        **nets,
    )
    return agent, header
