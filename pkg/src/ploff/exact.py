"""Exact reward-based pseudometrics on tabular MDPs.

The central object is a dense symmetric matrix d over ordered state-action
pairs (index s * |A| + a). One operator application maps d to

    |r(s1,a1) - r(s2,a2)| + gamma * mean_{a'} d(s'1, a'; s'2, a')

with the mean taken exactly over the finite action set and the *same* a' fed
to both successor states. Terminal states bootstrap through themselves
(absorbing self-loop). The operator is a gamma-contraction in sup norm, so
repeated application from any start converges to a unique fixed point; the
sampled variant updates one entry at a time and reaches the same fixed point
under full pair coverage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Transition
from .envs import TabularMDP, decode_one_hot
from .errors import ConvergenceError, ValidationError


@dataclass
class TabularPseudometric:
    """Dense nonnegative matrix over (state, action) pair indices."""

    values: np.ndarray  # (P, P) with P = num_states * num_actions
    num_states: int
    num_actions: int

    def __post_init__(self):
        p = self.num_states * self.num_actions
        if self.values.shape != (p, p):
            raise ValidationError(f"values must be ({p}, {p}), got {self.values.shape}")

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    def pair_index(self, s: int, a: int) -> int:
        return s * self.num_actions + a

    def at(self, s1: int, a1: int, s2: int, a2: int) -> float:
        return float(self.values[self.pair_index(s1, a1), self.pair_index(s2, a2)])

    def copy(self) -> "TabularPseudometric":
        return TabularPseudometric(self.values.copy(), self.num_states, self.num_actions)


@dataclass(frozen=True)
class SamplerConfig:
    """Pair-sampling plan for the sampled operator.

    The default distribution is uniform over all ordered pairs of pairs, so
    every entry is revisited with probability 1/P^2 > 0 per update.
    """

    max_updates: int = 1_000_000
    check_every: int = 500

    def min_pair_probability(self, num_pairs: int) -> float:
        return 1.0 / float(num_pairs) ** 2


@dataclass
class FixedPointDiagnostics:
    residuals: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def zero_metric(mdp: TabularMDP) -> TabularPseudometric:
    """The 0-pseudometric: every pair at distance zero."""
    p = mdp.num_states * mdp.num_actions
    return TabularPseudometric(np.zeros((p, p)), mdp.num_states, mdp.num_actions)


def _successor_states(mdp: TabularMDP) -> np.ndarray:
    """Per-pair successor state, with terminal states absorbing into themselves."""
    self_loop = np.arange(mdp.num_states)[:, None]
    return np.where(mdp.terminal[:, None], self_loop, mdp.next_state).reshape(-1)


def _shared_action_mean(d: TabularPseudometric) -> np.ndarray:
    """M[s1, s2] = mean over a' of d((s1, a'); (s2, a'))."""
    S, A = d.num_states, d.num_actions
    d4 = d.values.reshape(S, A, S, A)
    return np.einsum("iaja->ij", d4) / A


def apply_operator_F(mdp: TabularMDP, d: TabularPseudometric, gamma: float) -> TabularPseudometric:
    """One exact operator application over all ordered pair-of-pair entries."""
    if d.num_states != mdp.num_states or d.num_actions != mdp.num_actions:
        raise ValidationError("pseudometric dimensions do not match the MDP")
    if not (0.0 <= gamma < 1.0):
        raise ValidationError("gamma must be in [0, 1)")
    r = mdp.reward.reshape(-1)
    succ = _successor_states(mdp)
    mean_next = _shared_action_mean(d)
    out = np.abs(r[:, None] - r[None, :]) + gamma * mean_next[succ[:, None], succ[None, :]]
    return TabularPseudometric(out, mdp.num_states, mdp.num_actions)


def sup_distance(d1: TabularPseudometric, d2: TabularPseudometric) -> float:
    """Max absolute entrywise difference (the contraction norm)."""
    if d1.values.shape != d2.values.shape:
        raise ValidationError("pseudometric shapes differ")
    return float(np.max(np.abs(d1.values - d2.values)))


def iterate_to_fixed_point(
    mdp: TabularMDP,
    d0: TabularPseudometric,
    tol: float,
    max_iter: int,
    gamma: float,
) -> tuple[TabularPseudometric, FixedPointDiagnostics]:
    """Apply the operator until successive iterates are within ``tol``.

    Because the operator is a gamma-contraction, the returned d also
    satisfies sup_distance(F(d), d) <= gamma * tol <= tol.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    diag = FixedPointDiagnostics()
    d = d0
    for _ in range(max_iter):
        d_next = apply_operator_F(mdp, d, gamma)
        residual = sup_distance(d_next, d)
        diag.residuals.append(residual)
        diag.iterations += 1
        d = d_next
        if residual <= tol:
            diag.converged = True
            return d, diag
    last = diag.residuals[-1] if diag.residuals else float("inf")
    raise ConvergenceError(
        f"no fixed point after {max_iter} iterations (last residual {last:.3e})",
        residual=last,
    )


def _decode_transition(t: Transition, mdp: TabularMDP) -> tuple[int, int, float, int]:
    s = decode_one_hot(np.asarray(t.s))
    a = decode_one_hot(np.asarray(t.a))
    s_next = decode_one_hot(np.asarray(t.s_next))
    if s >= mdp.num_states or a >= mdp.num_actions or s_next >= mdp.num_states:
        raise ValidationError("transition does not index into the MDP")
    return s, a, float(t.r), s_next


def _sampled_value(
    values: np.ndarray, num_actions: int, r1: float, r2: float, ns1: int, ns2: int, gamma: float
) -> float:
    acts = np.arange(num_actions)
    rows = ns1 * num_actions + acts
    cols = ns2 * num_actions + acts
    return abs(r1 - r2) + gamma * float(values[rows, cols].mean())


def apply_sampled_operator(
    d: TabularPseudometric,
    t1: Transition,
    t2: Transition,
    mdp: TabularMDP,
    gamma: float,
) -> TabularPseudometric:
    """Sampled operator: refresh only the sampled entry (and its mirror).

    The sampled pair's entry is replaced by the operator image computed from
    the two logged transitions; every other entry is returned untouched.
    """
    s1, a1, r1, ns1 = _decode_transition(t1, mdp)
    s2, a2, r2, ns2 = _decode_transition(t2, mdp)
    out = d.copy()
    val = _sampled_value(out.values, d.num_actions, r1, r2, ns1, ns2, gamma)
    p, q = d.pair_index(s1, a1), d.pair_index(s2, a2)
    out.values[p, q] = val
    out.values[q, p] = val  # symmetric twin kept exact
    return out


def sampled_fixed_point(
    mdp: TabularMDP,
    cfg: SamplerConfig,
    tol: float,
    seed: int,
    gamma: float,
) -> TabularPseudometric:
    """Random-pair sampled iteration until within ``tol`` of the exact fixed point.

    Pairs of state-action pairs are drawn uniformly (full coverage), each
    draw refreshing one entry in place. Raises ConvergenceError when the
    update budget runs out first.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    exact, _ = iterate_to_fixed_point(mdp, zero_metric(mdp), tol=tol / 10.0, max_iter=100_000, gamma=gamma)

    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    P = S * A
    r = mdp.reward.reshape(-1)
    succ = _successor_states(mdp)
    values = np.zeros((P, P))
    acts = np.arange(A)

    gap = float("inf")
    for step in range(1, cfg.max_updates + 1):
        p = int(rng.integers(P))
        q = int(rng.integers(P))
        rows = succ[p] * A + acts
        cols = succ[q] * A + acts
        val = abs(r[p] - r[q]) + gamma * values[rows, cols].mean()
        values[p, q] = val
        values[q, p] = val
        if step % cfg.check_every == 0:
            gap = float(np.max(np.abs(values - exact.values)))
            if gap <= tol:
                return TabularPseudometric(values, S, A)
    raise ConvergenceError(
        f"sampled iteration still {gap:.3e} from the fixed point after {cfg.max_updates} updates",
        residual=gap,
    )


@dataclass
class AxiomReport:
    zero_diagonal: list[tuple[int, float]]
    symmetry: list[tuple[int, int, float]]
    triangle: list[tuple[int, int, int, float]]
    nonnegative: list[tuple[int, int, float]]

    @property
    def passed(self) -> bool:
        return not (self.zero_diagonal or self.symmetry or self.triangle or self.nonnegative)

    def summary(self) -> str:
        if self.passed:
            return "all pseudometric axioms hold"
        return (
            f"violations: diag={len(self.zero_diagonal)} sym={len(self.symmetry)} "
            f"triangle={len(self.triangle)} nonneg={len(self.nonnegative)}"
        )


def check_pseudometric_axioms(
    d: TabularPseudometric, tol: float, max_violations: int = 10
) -> AxiomReport:
    """Verify zero diagonal, symmetry, nonnegativity, and every triangle triple."""
    V = d.values
    P = V.shape[0]

    diag = np.abs(np.diag(V))
    zero_diag = [(int(i), float(diag[i])) for i in np.nonzero(diag > tol)[0][:max_violations]]

    asym = np.abs(V - V.T)
    sym_idx = np.argwhere(asym > tol)
    symmetry = [(int(i), int(j), float(asym[i, j])) for i, j in sym_idx[:max_violations]]

    neg_idx = np.argwhere(V < -tol)
    nonneg = [(int(i), int(j), float(V[i, j])) for i, j in neg_idx[:max_violations]]

    triangle: list[tuple[int, int, int, float]] = []
    for y in range(P):
        excess = V - (V[:, y][:, None] + V[y, :][None, :])
        bad = np.argwhere(excess > tol)
        for x, z in bad:
            if len(triangle) >= max_violations:
                break
            triangle.append((int(x), int(y), int(z), float(excess[x, z])))
        if len(triangle) >= max_violations:
            break

    return AxiomReport(zero_diagonal=zero_diag, symmetry=symmetry, triangle=triangle, nonnegative=nonneg)


def random_pseudometric(
    num_states: int,
    num_actions: int,
    rng: np.random.Generator,
    embed_dim: int = 4,
    scale: float = 1.0,
) -> TabularPseudometric:
    """Random valid pseudometric from pairwise distances of random points."""
    p = num_states * num_actions
    pts = scale * rng.standard_normal((p, embed_dim))
    diff = pts[:, None, :] - pts[None, :, :]
    values = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(values, 0.0)
    return TabularPseudometric(values, num_states, num_actions)
