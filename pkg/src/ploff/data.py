"""Logged-transition datasets: collection, reward scaling, sampling, storage.

Datasets are immutable after construction. On-disk format is "PLDS1": 5-byte
magic, one JSON header line, then n fixed-size little-endian float32 records
laid out [s | a | r | s_next | done(0.0/1.0)]. In memory everything is float64
but collectors round values through float32 so the save/load round trip is
exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .envs import ContinuousEnv, TabularMDP, state_one_hot, step_tabular
from .errors import DataFormatError, ValidationError
from .io import read_exact, read_header, write_header
from .seeding import substream

DATASET_MAGIC = b"PLDS1"
DATASET_VERSION = 1


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass(frozen=True)
class TransitionBatch:
    """Stacked transitions; row i of every array belongs to one transition."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray  # bool
    rows: np.ndarray | None = None  # dataset row of each transition, when known

    def __len__(self) -> int:
        return self.s.shape[0]


@dataclass(frozen=True)
class TransitionDataset:
    env_id: str
    state_dim: int
    action_dim: int
    s: np.ndarray  # (n, state_dim)
    a: np.ndarray  # (n, action_dim)
    r: np.ndarray  # (n,)
    s_next: np.ndarray  # (n, state_dim)
    done: np.ndarray  # (n,) bool
    reward_min: float
    reward_max: float
    scaled: bool

    def __post_init__(self):
        n = self.n
        if n < 1:
            raise ValidationError("dataset must contain at least one transition")
        if self.s.shape != (n, self.state_dim) or self.s_next.shape != (n, self.state_dim):
            raise ValidationError("state array shape mismatch")
        if self.a.shape != (n, self.action_dim):
            raise ValidationError("action array shape mismatch")
        if not np.all(np.isfinite(self.r)):
            raise ValidationError("rewards must be finite")
        if self.scaled and (self.r.min() < 0.0 or self.r.max() > 1.0):
            raise ValidationError("scaled dataset has rewards outside [0, 1]")

    @property
    def n(self) -> int:
        return self.r.shape[0]

    def __len__(self) -> int:
        return self.n

    def transition(self, i: int) -> Transition:
        return Transition(
            s=self.s[i], a=self.a[i], r=float(self.r[i]), s_next=self.s_next[i], done=bool(self.done[i])
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransitionDataset):
            return NotImplemented
        return (
            self.env_id == other.env_id
            and self.state_dim == other.state_dim
            and self.action_dim == other.action_dim
            and self.scaled == other.scaled
            and self.reward_min == other.reward_min
            and self.reward_max == other.reward_max
            and np.array_equal(self.s, other.s)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.s_next, other.s_next)
            and np.array_equal(self.done, other.done)
        )


def _as_f32_rounded(x: np.ndarray) -> np.ndarray:
    # values pass through float32 once so the PLDS1 round trip is lossless
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def make_dataset(
    env_id: str,
    s: np.ndarray,
    a: np.ndarray,
    r: np.ndarray,
    s_next: np.ndarray,
    done: np.ndarray,
    scaled: bool = False,
    reward_min: float | None = None,
    reward_max: float | None = None,
) -> TransitionDataset:
    r = np.asarray(r, dtype=np.float64)
    return TransitionDataset(
        env_id=env_id,
        state_dim=int(np.asarray(s).shape[1]),
        action_dim=int(np.asarray(a).shape[1]),
        s=np.asarray(s, dtype=np.float64),
        a=np.asarray(a, dtype=np.float64),
        r=r,
        s_next=np.asarray(s_next, dtype=np.float64),
        done=np.asarray(done, dtype=bool),
        reward_min=float(r.min() if reward_min is None else reward_min),
        reward_max=float(r.max() if reward_max is None else reward_max),
        scaled=scaled,
    )


def collect_qlearning_dataset(
    mdp: TabularMDP,
    episodes: int,
    epsilon: float,
    gamma: float,
    seed: int,
    learning_rate: float = 0.1,
    env_id: str = "gridworld",
) -> TransitionDataset:
    """Log every transition visited by tabular epsilon-greedy Q-learning.

    Q starts at zero, ties in the greedy step break uniformly at random, and
    episodes truncate at the MDP time limit without setting done.  Encodings
    are one-hot; rewards are returned unscaled.
    """
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    if not (0.0 <= epsilon <= 1.0):
        raise ValidationError("epsilon must be in [0, 1]")
    if not (0.0 <= gamma < 1.0):
        raise ValidationError("gamma must be in [0, 1)")

    rng = substream(seed, "qlearning-data")
    q = np.zeros((mdp.num_states, mdp.num_actions))
    rows_s, rows_a, rows_r, rows_ns, rows_done = [], [], [], [], []

    for _ in range(episodes):
        s = int(rng.choice(mdp.start_states))
        for _ in range(mdp.time_limit):
            if rng.random() < epsilon:
                a = int(rng.integers(mdp.num_actions))
            else:
                # random tie-break; argmax alone would pin an untrained
                # all-zero Q to action 0 and never explore
                best = np.flatnonzero(q[s] == q[s].max())
                a = int(best[0]) if len(best) == 1 else int(rng.choice(best))
            ns, r, done = step_tabular(mdp, s, a)
            rows_s.append(state_one_hot(s, mdp.num_states))
            rows_a.append(state_one_hot(a, mdp.num_actions))
            rows_r.append(r)
            rows_ns.append(state_one_hot(ns, mdp.num_states))
            rows_done.append(done)
            bootstrap = 0.0 if mdp.terminal[ns] else float(np.max(q[ns]))
            q[s, a] += learning_rate * (r + gamma * bootstrap - q[s, a])
            s = ns
            if done:
                break

    return make_dataset(
        env_id=env_id,
        s=_as_f32_rounded(np.array(rows_s)),
        a=_as_f32_rounded(np.array(rows_a)),
        r=_as_f32_rounded(np.array(rows_r)),
        s_next=_as_f32_rounded(np.array(rows_ns)),
        done=np.array(rows_done, dtype=bool),
    )


# PD gains for the scripted point-mass controllers; the medium tier runs the
# same controller with early-stopped (scaled-down) gains.
EXPERT_GAINS = (5.0, 3.0)
MEDIUM_GAIN_SCALE = 0.3

POLICY_TAGS = ("random", "medium", "expert", "mixture")


def _pd_action(env: ContinuousEnv, state: np.ndarray, kp: float, kd: float) -> np.ndarray:
    pos, vel = state[:2], state[2:]
    return kp * (env.goal - pos) - kd * vel


def collect_scripted_dataset(
    env: ContinuousEnv,
    policy_tag: str,
    noise_scale: float = 0.0,
    episodes: int = 100,
    seed: int = 0,
    env_id: str | None = None,
) -> TransitionDataset:
    """Roll out a scripted behavior policy and log every transition.

    random: uniform actions in the box. expert: PD controller toward the
    goal. medium: the expert controller with early-stopped gains plus action
    noise. mixture: expert episodes followed by random episodes.
    """
    if policy_tag not in POLICY_TAGS:
        raise ValidationError(f"unknown policy tag {policy_tag!r}")
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")

    rng = substream(seed, f"scripted-data-{policy_tag}")
    kp, kd = EXPERT_GAINS

    def controller(tag: str, state: np.ndarray) -> np.ndarray:
        if tag == "random":
            return rng.uniform(env.action_low, env.action_high)
        if tag == "expert":
            base = _pd_action(env, state, kp, kd)
        else:  # medium
            base = _pd_action(env, state, kp * MEDIUM_GAIN_SCALE, kd * MEDIUM_GAIN_SCALE)
        if noise_scale > 0.0:
            base = base + noise_scale * rng.standard_normal(env.action_dim)
        return base

    if policy_tag == "mixture":
        half = episodes // 2
        parts = [("expert", episodes - half), ("random", half)]
    else:
        parts = [(policy_tag, episodes)]

    rows_s, rows_a, rows_r, rows_ns = [], [], [], []
    for tag, count in parts:
        for _ in range(count):
            state = env.reset()
            for _ in range(env.time_limit):
                action = np.clip(controller(tag, state), env.action_low, env.action_high)
                next_state, reward = env.step(state, action)
                rows_s.append(state)
                rows_a.append(action)
                rows_r.append(reward)
                rows_ns.append(next_state)
                state = next_state

    n = len(rows_r)
    return make_dataset(
        env_id=env_id or f"pointmass-{policy_tag}",
        s=_as_f32_rounded(np.array(rows_s)),
        a=_as_f32_rounded(np.array(rows_a)),
        r=_as_f32_rounded(np.array(rows_r)),
        s_next=_as_f32_rounded(np.array(rows_ns)),
        done=np.zeros(n, dtype=bool),
    )


def scripted_returns(
    env: ContinuousEnv,
    policy_tag: str,
    episodes: int = 10,
    seed: int = 0,
    noise_scale: float = 0.0,
) -> np.ndarray:
    """Per-episode undiscounted returns of a scripted policy.

    Used as evaluation references: the random and expert policies anchor the
    normalized score, and the dataset's behavior policy anchors comparisons.
    """
    if policy_tag not in ("random", "expert", "medium"):
        raise ValidationError(f"unknown reference policy {policy_tag!r}")
    rng = substream(seed, f"scripted-eval-{policy_tag}")
    kp, kd = EXPERT_GAINS
    totals = []
    for _ in range(episodes):
        state = env.reset()
        total = 0.0
        for _ in range(env.time_limit):
            if policy_tag == "random":
                base = rng.uniform(env.action_low, env.action_high)
            elif policy_tag == "expert":
                base = _pd_action(env, state, kp, kd)
            else:
                base = _pd_action(env, state, kp * MEDIUM_GAIN_SCALE, kd * MEDIUM_GAIN_SCALE)
            if noise_scale > 0.0:
                base = base + noise_scale * rng.standard_normal(env.action_dim)
            state, reward = env.step(state, np.clip(base, env.action_low, env.action_high))
            total += reward
        totals.append(total)
    return np.array(totals)


def scale_rewards(d: TransitionDataset) -> TransitionDataset:
    """Affinely map rewards onto [0, 1], recording the raw min/max."""
    if d.scaled:
        raise ValidationError("dataset is already scaled")
    lo, hi = float(d.r.min()), float(d.r.max())
    if hi <= lo:
        raise ValidationError("cannot scale constant rewards")
    scaled_r = (d.r - lo) / (hi - lo)
    return replace(d, r=scaled_r, reward_min=lo, reward_max=hi, scaled=True)


def unscale_rewards(d: TransitionDataset) -> TransitionDataset:
    """Inverse of scale_rewards using the stored raw min/max."""
    if not d.scaled:
        raise ValidationError("dataset is not scaled")
    raw_r = d.r * (d.reward_max - d.reward_min) + d.reward_min
    return replace(d, r=raw_r, scaled=False)


def _gather(d: TransitionDataset, idx: np.ndarray) -> TransitionBatch:
    return TransitionBatch(
        s=d.s[idx], a=d.a[idx], r=d.r[idx], s_next=d.s_next[idx], done=d.done[idx], rows=idx
    )


def sample_batch(d: TransitionDataset, batch: int, rng: np.random.Generator) -> TransitionBatch:
    """One uniform-with-replacement draw of ``batch`` transitions."""
    if batch < 1:
        raise ValidationError("batch must be >= 1")
    idx = rng.integers(0, d.n, size=batch)
    return _gather(d, idx)


def sample_pair_batch(
    d: TransitionDataset, batch: int, rng: np.random.Generator
) -> tuple[TransitionBatch, TransitionBatch]:
    """Two independent uniform-with-replacement draws of ``batch`` transitions."""
    return sample_batch(d, batch, rng), sample_batch(d, batch, rng)


def save_dataset(d: TransitionDataset, path: str | Path) -> None:
    header = {
        "version": DATASET_VERSION,
        "env_id": d.env_id,
        "state_dim": d.state_dim,
        "action_dim": d.action_dim,
        "n": d.n,
        "reward_min": d.reward_min,
        "reward_max": d.reward_max,
        "scaled": d.scaled,
    }
    record = np.concatenate(
        [
            d.s.astype(np.float32),
            d.a.astype(np.float32),
            d.r.astype(np.float32)[:, None],
            d.s_next.astype(np.float32),
            d.done.astype(np.float32)[:, None],
        ],
        axis=1,
    )
    with open(path, "wb") as fh:
        write_header(fh, DATASET_MAGIC, header)
        fh.write(np.ascontiguousarray(record, dtype="<f4").tobytes())


def load_dataset(path: str | Path) -> TransitionDataset:
    with open(path, "rb") as fh:
        header = read_header(fh, DATASET_MAGIC)
        for key in ("version", "env_id", "state_dim", "action_dim", "n", "reward_min", "reward_max", "scaled"):
            if key not in header:
                raise DataFormatError(f"dataset header missing {key!r}")
        if header["version"] != DATASET_VERSION:
            raise DataFormatError(f"unsupported dataset version {header['version']}")
        sd, ad, n = int(header["state_dim"]), int(header["action_dim"]), int(header["n"])
        if n < 1 or sd < 1 or ad < 1:
            raise DataFormatError("dataset header has non-positive dimensions")
        width = 2 * sd + ad + 2
        payload = fh.read()
    if len(payload) != n * width * 4:
        raise DataFormatError(
            f"record payload is {len(payload)} bytes; header promises {n * width * 4}"
        )
    record = np.frombuffer(payload, dtype="<f4").reshape(n, width).astype(np.float64)
    done_col = record[:, -1]
    if not np.all(np.isin(done_col, (0.0, 1.0))):
        raise DataFormatError("done column contains values other than 0.0/1.0")
    return TransitionDataset(
        env_id=str(header["env_id"]),
        state_dim=sd,
        action_dim=ad,
        s=record[:, :sd],
        a=record[:, sd : sd + ad],
        r=record[:, sd + ad],
        s_next=record[:, sd + ad + 1 : 2 * sd + ad + 1],
        done=done_col.astype(bool),
        reward_min=float(header["reward_min"]),
        reward_max=float(header["reward_max"]),
        scaled=bool(header["scaled"]),
    )
