"""Siamese approximation of the reward-based pseudometric.

Two embedding networks are trained against each other from logged
transitions only:

* phi embeds a (state, action) pair; d_phi is the Euclidean distance
  between two embeddings and regresses toward
  |r1 - r2| + gamma * ||psi_target(s'1) - psi_target(s'2)||.
* psi embeds a state; d_psi regresses toward the average of
  ||phi_target(s1, u) - phi_target(s2, u)|| over uniform actions u, the
  same u fed to both states.

Bootstrap terms always go through slow-moving target copies, and each
loss only writes gradients into its own network. Both induced distances
are pseudometrics by construction for any parameter values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import TransitionDataset, sample_batch
from .envs import ActionSpace
from .errors import NonFiniteError, ValidationError
from .io import load_checkpoint, save_checkpoint
from .nets import Adam, Mlp, backward, forward, hard_update, init_mlp, mlp_from_tensors, mlp_tensors, polyak_update
from .seeding import substream

EMBEDDER_ACTIVATIONS = ("relu", "identity")


@dataclass
class EmbedderPair:
    """Online and target embedders plus the constants their losses use."""

    phi: Mlp
    psi: Mlp
    phi_target: Mlp
    psi_target: Mlp
    state_dim: int
    action_dim: int
    tau_metric: float = 0.005
    gamma_metric: float = 0.9
    n_action_samples: int = 256

    def __post_init__(self):
        if not (0.0 < self.tau_metric <= 1.0):
            raise ValidationError("tau_metric must be in (0, 1]")
        if not (0.0 <= self.gamma_metric < 1.0):
            raise ValidationError("gamma_metric must be in [0, 1)")
        if self.n_action_samples < 1:
            raise ValidationError("n_action_samples must be >= 1")
        if self.phi.in_dim != self.state_dim + self.action_dim:
            raise ValidationError("phi input dim must be state_dim + action_dim")
        if self.psi.in_dim != self.state_dim:
            raise ValidationError("psi input dim must be state_dim")

    @property
    def embed_dim(self) -> int:
        return self.phi.out_dim

    @property
    def hidden_dim(self) -> int:
        return self.phi.weights[0].shape[1]


@dataclass(frozen=True)
class MetricTrainConfig:
    """Training-loop settings; defaults follow the reference setup."""

    action_space: ActionSpace
    steps: int = 2_000_000
    learning_rate: float = 1e-3
    batch: int = 256
    n_action_samples: int = 256
    tau: float = 0.005
    gamma: float = 0.9
    seed: int = 0
    hidden_dim: int = 1024
    embed_dim: int = 32
    independent_actions: bool = False
    log_every: int = 1000

    def __post_init__(self):
        for name in ("learning_rate", "batch", "n_action_samples", "tau", "log_every"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if not (0.0 <= self.gamma < 1.0):
            raise ValidationError("gamma must be in [0, 1)")


def init_embedders(
    state_dim: int,
    action_dim: int,
    hidden_dim: int = 1024,
    embed_dim: int = 32,
    seed: int = 0,
    tau_metric: float = 0.005,
    gamma_metric: float = 0.9,
    n_action_samples: int = 256,
) -> EmbedderPair:
    """Fresh pair with targets equal to the online nets."""
    if min(state_dim, action_dim, hidden_dim, embed_dim) < 1:
        raise ValidationError("all dimensions must be positive")
    phi = init_mlp(
        (state_dim + action_dim, hidden_dim, embed_dim),
        EMBEDDER_ACTIVATIONS,
        substream(seed, "phi-init"),
    )
    psi = init_mlp((state_dim, hidden_dim, embed_dim), EMBEDDER_ACTIVATIONS, substream(seed, "psi-init"))
    return EmbedderPair(
        phi=phi,
        psi=psi,
        phi_target=phi.copy(),
        psi_target=psi.copy(),
        state_dim=state_dim,
        action_dim=action_dim,
        tau_metric=tau_metric,
        gamma_metric=gamma_metric,
        n_action_samples=n_action_samples,
    )


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=1))


def embed_phi(net: Mlp, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Batch phi embeddings of concatenated (s, a)."""
    return forward(net, np.concatenate([s, a], axis=1))[0]


def embed_psi(net: Mlp, s: np.ndarray) -> np.ndarray:
    return forward(net, s)[0]


def d_phi(pair: EmbedderPair, s1, a1, s2, a2):
    """Euclidean distance between phi embeddings; scalar in, scalar out."""
    s1b, single = _as_batch(s1)
    a1b, _ = _as_batch(a1)
    s2b, _ = _as_batch(s2)
    a2b, _ = _as_batch(a2)
    d = _row_norms(embed_phi(pair.phi, s1b, a1b) - embed_phi(pair.phi, s2b, a2b))
    return float(d[0]) if single else d


def d_psi(pair: EmbedderPair, s1, s2):
    s1b, single = _as_batch(s1)
    s2b, _ = _as_batch(s2)
    d = _row_norms(embed_psi(pair.psi, s1b) - embed_psi(pair.psi, s2b))
    return float(d[0]) if single else d


def _distance_grad_out(diff: np.ndarray, dist: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """d(mean residual^2)/d(embedding of side 1); side 2 gets the negative.

    At dist = 0 the norm is not differentiable; the zero subgradient is used.
    """
    n = residual.shape[0]
    safe = np.where(dist > 0.0, dist, 1.0)
    unit = diff / safe[:, None]
    unit[dist == 0.0] = 0.0
    return (2.0 * residual / n)[:, None] * unit


def loss_phi(
    pair: EmbedderPair,
    s1: np.ndarray,
    a1: np.ndarray,
    r1: np.ndarray,
    s1_next: np.ndarray,
    s2: np.ndarray,
    a2: np.ndarray,
    r2: np.ndarray,
    s2_next: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Mean squared temporal-difference residual of d_phi, gradients on phi only.

    Terminal next states need no special casing here: collectors log the
    absorbing successor, so the bootstrap term reads the absorbing state.
    """
    if len(s1) == 0:
        raise ValidationError("batch must be nonempty")
    b = s1.shape[0]
    x = np.concatenate([np.concatenate([s1, a1], axis=1), np.concatenate([s2, a2], axis=1)], axis=0)
    e, cache = forward(pair.phi, x)
    diff = e[:b] - e[b:]
    dist = _row_norms(diff)

    boot = _row_norms(embed_psi(pair.psi_target, s1_next) - embed_psi(pair.psi_target, s2_next))
    target = np.abs(r1 - r2) + pair.gamma_metric * boot
    residual = dist - target
    loss = float(np.mean(residual * residual))

    g1 = _distance_grad_out(diff, dist, residual)
    grads, _ = backward(pair.phi, cache, np.concatenate([g1, -g1], axis=0))
    return loss, grads


def loss_psi(
    pair: EmbedderPair,
    s1: np.ndarray,
    s2: np.ndarray,
    space: ActionSpace,
    rng: np.random.Generator,
    independent_actions: bool = False,
) -> tuple[float, list[np.ndarray]]:
    """Mean squared residual of d_psi against the action-averaged phi_target.

    By default the same action sample u_j is paired with both states; the
    independent_actions switch draws a second sample for the second state.
    """
    if len(s1) == 0:
        raise ValidationError("batch must be nonempty")
    if space.dim != pair.action_dim:
        raise ValidationError("action space dim does not match the embedder")
    b = s1.shape[0]
    e, cache = forward(pair.psi, np.concatenate([s1, s2], axis=0))
    diff = e[:b] - e[b:]
    dist = _row_norms(diff)

    acts1 = space.loss_actions(rng, pair.n_action_samples)
    acts2 = space.loss_actions(rng, pair.n_action_samples) if independent_actions else acts1
    m = acts1.shape[0]
    rep1 = np.repeat(s1, m, axis=0)
    rep2 = np.repeat(s2, m, axis=0)
    f1 = embed_phi(pair.phi_target, rep1, np.tile(acts1, (b, 1)))
    f2 = embed_phi(pair.phi_target, rep2, np.tile(acts2, (b, 1)))
    pairwise = _row_norms(f1 - f2).reshape(b, m)
    target = pairwise.mean(axis=1)

    residual = dist - target
    loss = float(np.mean(residual * residual))
    g1 = _distance_grad_out(diff, dist, residual)
    grads, _ = backward(pair.psi, cache, np.concatenate([g1, -g1], axis=0))
    return loss, grads


def target_update(pair: EmbedderPair, tau: float) -> EmbedderPair:
    """Exponential averaging of both targets toward the online nets, in place."""
    polyak_update(pair.phi_target, pair.phi, tau)
    polyak_update(pair.psi_target, pair.psi, tau)
    return pair


@dataclass
class MetricTrainLog:
    steps: list[int] = field(default_factory=list)
    loss_phi: list[float] = field(default_factory=list)
    loss_psi: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.steps, self.loss_phi, self.loss_psi))


def train_metric(dataset: TransitionDataset, cfg: MetricTrainConfig) -> tuple[EmbedderPair, MetricTrainLog]:
    """Alternating gradient steps on both losses with target averaging.

    Each iteration: one optimizer step on the phi loss, one on the psi
    loss (both from the same sampled batch pair), then both targets move
    by tau. Aborts on a non-finite loss.
    """
    if not dataset.scaled:
        raise ValidationError("metric training expects a reward-scaled dataset")
    if cfg.action_space.dim != dataset.action_dim:
        raise ValidationError("action space dim does not match the dataset")
    pair = init_embedders(
        dataset.state_dim,
        dataset.action_dim,
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.embed_dim,
        seed=cfg.seed,
        tau_metric=cfg.tau,
        gamma_metric=cfg.gamma,
        n_action_samples=cfg.n_action_samples,
    )
    rng_batch = substream(cfg.seed, "metric-batch")
    rng_actions = substream(cfg.seed, "metric-actions")
    opt_phi = Adam.for_params(pair.phi.params(), cfg.learning_rate)
    opt_psi = Adam.for_params(pair.psi.params(), cfg.learning_rate)
    log = MetricTrainLog()

    for step in range(1, cfg.steps + 1):
        b1 = sample_batch(dataset, cfg.batch, rng_batch)
        b2 = sample_batch(dataset, cfg.batch, rng_batch)
        lp, gp = loss_phi(pair, b1.s, b1.a, b1.r, b1.s_next, b2.s, b2.a, b2.r, b2.s_next)
        opt_phi.step(pair.phi.params(), gp)
        ls, gs = loss_psi(pair, b1.s, b2.s, cfg.action_space, rng_actions, cfg.independent_actions)
        opt_psi.step(pair.psi.params(), gs)
        target_update(pair, cfg.tau)
        if not (math.isfinite(lp) and math.isfinite(ls)):
            raise NonFiniteError(f"non-finite metric loss at step {step}: phi={lp}, psi={ls}")
        if step % cfg.log_every == 0:
            log.steps.append(step)
            log.loss_phi.append(lp)
            log.loss_psi.append(ls)
    return pair, log


CHECKPOINT_KIND_METRIC = "metric-embedders"


def save_embedders(path: str, pair: EmbedderPair, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": CHECKPOINT_KIND_METRIC,
        "state_dim": pair.state_dim,
        "action_dim": pair.action_dim,
        "hidden_dim": pair.hidden_dim,
        "embed_dim": pair.embed_dim,
        "tau_metric": pair.tau_metric,
        "gamma_metric": pair.gamma_metric,
        "n_action_samples": pair.n_action_samples,
    }
    if extra_meta:
        meta.update(extra_meta)
    tensors: dict[str, np.ndarray] = {}
    tensors.update(mlp_tensors(pair.phi, "phi"))
    tensors.update(mlp_tensors(pair.psi, "psi"))
    tensors.update(mlp_tensors(pair.phi_target, "phi_target"))
    tensors.update(mlp_tensors(pair.psi_target, "psi_target"))
    save_checkpoint(path, meta, tensors)


def load_embedders(path: str) -> tuple[EmbedderPair, dict]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != CHECKPOINT_KIND_METRIC:
        raise ValidationError(f"not a metric checkpoint: kind={header.get('kind')!r}")
    pair = EmbedderPair(
        phi=mlp_from_tensors(tensors, "phi", EMBEDDER_ACTIVATIONS),
        psi=mlp_from_tensors(tensors, "psi", EMBEDDER_ACTIVATIONS),
        phi_target=mlp_from_tensors(tensors, "phi_target", EMBEDDER_ACTIVATIONS),
        psi_target=mlp_from_tensors(tensors, "psi_target", EMBEDDER_ACTIVATIONS),
        state_dim=int(header["state_dim"]),
        action_dim=int(header["action_dim"]),
        tau_metric=float(header["tau_metric"]),
        gamma_metric=float(header["gamma_metric"]),
        n_action_samples=int(header["n_action_samples"]),
    )
    return pair, header


def reset_targets(pair: EmbedderPair) -> EmbedderPair:
    """Snap targets back onto the online nets (tau = 1 update)."""
    hard_update(pair.phi_target, pair.phi)
    hard_update(pair.psi_target, pair.psi)
    return pair


__all__ = [
    "EmbedderPair",
    "MetricTrainConfig",
    "MetricTrainLog",
    "init_embedders",
    "embed_phi",
    "embed_psi",
    "d_phi",
    "d_psi",
    "loss_phi",
    "loss_psi",
    "target_update",
    "train_metric",
    "save_embedders",
    "load_embedders",
    "reset_targets",
]
