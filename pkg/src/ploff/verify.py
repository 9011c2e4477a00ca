"""Self-check suites: operator properties, gradient checks, neighbor oracle.

Each suite returns (case label, ok) pairs so both the CLI and the test
suite can run the same checks. All randomness is seeded internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import make_dataset
from .envs import discrete_space, random_mdp
from .errors import ConvergenceError
from .exact import (
    SamplerConfig,
    apply_operator_F,
    check_pseudometric_axioms,
    iterate_to_fixed_point,
    random_pseudometric,
    sampled_fixed_point,
    sup_distance,
    zero_metric,
)
from .metric import init_embedders, loss_phi, loss_psi
from .neighbors import (
    build_neighbor_index,
    identity_embedders,
    query_candidates,
    query_candidates_batch,
)
from .seeding import substream


def finite_difference_grads(
    f: Callable[[], float], params: list[np.ndarray], eps: float = 1e-6
) -> list[np.ndarray]:
    """Central differences of f with respect to every entry of params.

    Mutates each parameter in place and restores it; f must read the same
    array objects.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = p[i]
            p[i] = orig + eps
            f_hi = f()
            p[i] = orig - eps
            f_lo = f()
            p[i] = orig
            g[i] = (f_hi - f_lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(
    analytic: list[np.ndarray], numeric: list[np.ndarray], floor: float = 1e-6
) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized over all params."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@dataclass
class SuiteResult:
    name: str
    cases: list[tuple[str, bool]]

    @property
    def passed(self) -> int:
        return sum(ok for _, ok in self.cases)

    @property
    def failed(self) -> int:
        return len(self.cases) - self.passed

    @property
    def ok(self) -> bool:
        return self.failed == 0


def _suite_corpus(n: int, seed: int, max_states: int = 10, max_actions: int = 4):
    rng = substream(seed, "verify-corpus")
    out = []
    for _ in range(n):
        ns = int(rng.integers(2, max_states + 1))
        na = int(rng.integers(1, max_actions + 1))
        out.append((random_mdp(ns, na, rng, terminal_frac=0.1), rng))
    return out


def suite_axioms(n_instances: int = 20, seed: int = 11) -> SuiteResult:
    """Fixed points of random MDPs satisfy all pseudometric axioms."""
    cases = []
    for i, (mdp, _) in enumerate(_suite_corpus(n_instances, seed)):
        d, _ = iterate_to_fixed_point(mdp, zero_metric(mdp), tol=1e-10, max_iter=10_000, gamma=0.9)
        report = check_pseudometric_axioms(d, tol=1e-9)
        cases.append((f"axioms[{i}] |S|={mdp.num_states} |A|={mdp.num_actions}", report.passed))
    return SuiteResult("axioms", cases)


def suite_contraction(n_instances: int = 20, seed: int = 13) -> SuiteResult:
    """One operator application shrinks sup distance by at least gamma."""
    cases = []
    for i, (mdp, rng) in enumerate(_suite_corpus(n_instances, seed)):
        gamma = float(rng.choice([0.5, 0.9, 0.99]))
        d1 = random_pseudometric(mdp.num_states, mdp.num_actions, rng)
        d2 = random_pseudometric(mdp.num_states, mdp.num_actions, rng)
        lhs = sup_distance(apply_operator_F(mdp, d1, gamma), apply_operator_F(mdp, d2, gamma))
        rhs = gamma * sup_distance(d1, d2) + 1e-12
        cases.append((f"contraction[{i}] gamma={gamma}", lhs <= rhs))
    return SuiteResult("contraction", cases)


def suite_fixed_point(n_instances: int = 10, seed: int = 17) -> SuiteResult:
    """Residuals decay geometrically and the iterate converges."""
    cases = []
    for i, (mdp, _) in enumerate(_suite_corpus(n_instances, seed)):
        ok = True
        try:
            _, diag = iterate_to_fixed_point(mdp, zero_metric(mdp), tol=1e-10, max_iter=10_000, gamma=0.9)
            for a, b in zip(diag.residuals, diag.residuals[1:]):
                if b > 0.9 * a + 1e-9:
                    ok = False
        except ConvergenceError:
            ok = False
        cases.append((f"fixed_point[{i}]", ok))
    return SuiteResult("fixed_point", cases)


def suite_sampled(n_instances: int = 3, seed: int = 19) -> SuiteResult:
    """Sampled single-entry updates reach the exact fixed point."""
    cases = []
    rng = substream(seed, "verify-sampled")
    for i in range(n_instances):
        ns = int(rng.integers(2, 5))
        na = int(rng.integers(1, 3))
        mdp = random_mdp(ns, na, rng)
        ok = True
        try:
            sampled_fixed_point(mdp, SamplerConfig(max_updates=1_000_000), tol=1e-6, seed=i, gamma=0.9)
        except ConvergenceError:
            ok = False
        cases.append((f"sampled[{i}] |S|={ns} |A|={na}", ok))
    return SuiteResult("sampled", cases)


def suite_gradients(seed: int = 23) -> SuiteResult:
    """Analytic loss gradients match central finite differences."""
    rng = substream(seed, "verify-grads")
    state_dim, action_dim, batch = 3, 2, 4
    pair = init_embedders(state_dim, action_dim, hidden_dim=8, embed_dim=4, seed=seed)
    s1 = rng.standard_normal((batch, state_dim))
    a1 = rng.standard_normal((batch, action_dim))
    r1 = rng.uniform(0, 1, batch)
    sn1 = rng.standard_normal((batch, state_dim))
    s2 = rng.standard_normal((batch, state_dim))
    a2 = rng.standard_normal((batch, action_dim))
    r2 = rng.uniform(0, 1, batch)
    sn2 = rng.standard_normal((batch, state_dim))

    _, g_phi = loss_phi(pair, s1, a1, r1, sn1, s2, a2, r2, sn2)
    fd_phi = finite_difference_grads(
        lambda: loss_phi(pair, s1, a1, r1, sn1, s2, a2, r2, sn2)[0], pair.phi.params()
    )
    err_phi = max_relative_error(g_phi, fd_phi)

    space = discrete_space(action_dim)
    _, g_psi = loss_psi(pair, s1, s2, space, substream(seed, "verify-psi-actions"))
    fd_psi = finite_difference_grads(
        lambda: loss_psi(pair, s1, s2, space, substream(seed, "verify-psi-actions"))[0],
        pair.psi.params(),
    )
    err_psi = max_relative_error(g_psi, fd_psi)

    return SuiteResult(
        "gradients",
        [
            (f"loss_phi rel_err={err_phi:.2e}", err_phi <= 1e-4),
            (f"loss_psi rel_err={err_psi:.2e}", err_psi <= 1e-4),
        ],
    )


def _brute_force_neighbors(emb: np.ndarray, q: np.ndarray, k: int) -> np.ndarray:
    d = np.sqrt(np.sum((emb - q) ** 2, axis=1))
    order = np.lexsort((np.arange(len(emb)), d))
    return order[: min(k, len(emb))]


def suite_knn(n_instances: int = 20, seed: int = 29) -> SuiteResult:
    """Tree-backed candidate queries equal the brute-force scan."""
    rng = substream(seed, "verify-knn")
    cases = []
    for i in range(n_instances):
        n = int(rng.integers(5, 300))
        state_dim = int(rng.choice([2, 4]))
        action_dim = 2
        k = int(rng.integers(1, 60))
        s = rng.standard_normal((n, state_dim))
        a = rng.standard_normal((n, action_dim))
        ds = make_dataset(
            env_id="verify-knn",
            s=s,
            a=a,
            r=rng.uniform(0, 1, n),
            s_next=rng.standard_normal((n, state_dim)),
            done=np.zeros(n, dtype=bool),
        )
        pair = identity_embedders(state_dim, action_dim)
        idx = build_neighbor_index(pair, ds, k)
        ok = True
        for _ in range(5):
            q = rng.standard_normal(state_dim)
            got = query_candidates(idx, q)
            want = _brute_force_neighbors(s, q, k)
            if not np.array_equal(got, want):
                ok = False
        # Batched queries (vectorized path) must agree too; dataset states
        # as queries stress the duplicate-group fallback.
        qs = np.concatenate([rng.standard_normal((5, state_dim)), s[: min(3, n)]], axis=0)
        got_b = query_candidates_batch(idx, qs)
        for row, q in enumerate(qs):
            if not np.array_equal(got_b[row], _brute_force_neighbors(s, q, k)):
                ok = False
        cases.append((f"knn[{i}] n={n} k={k}", ok))
    return SuiteResult("knn", cases)


def run_all_suites(quick: bool = False) -> list[SuiteResult]:
    scale = 5 if quick else 20
    return [
        suite_axioms(n_instances=scale),
        suite_contraction(n_instances=scale),
        suite_fixed_point(n_instances=max(3, scale // 2)),
        suite_sampled(n_instances=2 if quick else 3),
        suite_gradients(),
        suite_knn(n_instances=scale),
    ]
