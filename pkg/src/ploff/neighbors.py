"""Neighbor candidate sets and the lookup bonus.

For a query state s, the candidate set H(s) holds the k dataset rows whose
states are nearest under d_psi (exact tree search, ties by lowest dataset
index). The projection distance of (s, a) is the minimum d_phi from (s, a)
to the candidate rows' cached phi embeddings, and the bonus maps that
distance through one of three forms:

    q_scaled_exp   Q(s,a) * exp(-beta * d)
    exp            exp(-beta * d), in (0, 1]
    one_minus_exp  1 - exp(beta * d), always <= 0

Identity embedders reuse the same machinery for the raw-Euclidean ablation:
a one-layer identity network makes the "embedding" the input itself.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .data import TransitionDataset
from .errors import DataFormatError, ValidationError
from .io import read_header, read_tensor, write_header, write_tensor
from .metric import EmbedderPair, embed_phi, embed_psi
from .nets import Mlp, backward, forward
from .seeding import worker_count

NEIGHBOR_MAGIC = b"PLNN1"
NEIGHBOR_VERSION = 1
BONUS_FORMS = ("q_scaled_exp", "exp", "one_minus_exp")

# Relative slack when turning the kth-nearest distance into a ball radius;
# covers last-ulp disagreement between tree and vectorized arithmetic.
_RADIUS_SLACK = 1e-9

_EMBED_CHUNK = 4096


@dataclass(frozen=True)
class BonusSpec:
    form: str = "q_scaled_exp"
    beta: float = 0.5
    alpha_actor: float = 5.0
    alpha_critic: float = 1.0

    def __post_init__(self):
        if self.form not in BONUS_FORMS:
            raise ValidationError(f"unknown bonus form {self.form!r}")
        if self.beta <= 0:
            raise ValidationError("beta must be > 0")
        if self.alpha_actor < 0 or self.alpha_critic < 0:
            raise ValidationError("bonus coefficients must be >= 0")


def identity_mlp(dim: int) -> Mlp:
    """One identity layer: the network output is exactly its input."""
    return Mlp([np.eye(dim)], [np.zeros(dim)], ("identity",))


def identity_embedders(state_dim: int, action_dim: int) -> EmbedderPair:
    """Embedder pair whose distances are raw Euclidean distances."""
    phi = identity_mlp(state_dim + action_dim)
    psi = identity_mlp(state_dim)
    return EmbedderPair(
        phi=phi,
        psi=psi,
        phi_target=phi.copy(),
        psi_target=psi.copy(),
        state_dim=state_dim,
        action_dim=action_dim,
    )


def _embed_all_states(pair: EmbedderPair, s: np.ndarray) -> np.ndarray:
    out = [embed_psi(pair.psi, s[i : i + _EMBED_CHUNK]) for i in range(0, len(s), _EMBED_CHUNK)]
    return np.concatenate(out, axis=0)


def _embed_all_pairs(pair: EmbedderPair, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = [
        embed_phi(pair.phi, s[i : i + _EMBED_CHUNK], a[i : i + _EMBED_CHUNK])
        for i in range(0, len(s), _EMBED_CHUNK)
    ]
    return np.concatenate(out, axis=0)


@dataclass
class NeighborIndex:
    """Immutable-after-build candidate index over one dataset.

    neighbor_ids[i] lists, for dataset state i used as the query, the
    min(k, N) nearest dataset rows by (d_psi, index).
    """

    k: int
    embedder: EmbedderPair
    psi_embeddings: np.ndarray  # (N, psi_embed_dim)
    phi_embeddings: np.ndarray  # (N, phi_embed_dim)
    neighbor_ids: np.ndarray  # (N, min(k, N)) int64
    _tree: cKDTree = field(init=False, repr=False)
    _group_members: list[np.ndarray] = field(init=False, repr=False)
    _group_sizes: np.ndarray = field(init=False, repr=False)
    _single_member: np.ndarray = field(init=False, repr=False)
    _unique_sq: np.ndarray = field(init=False, repr=False)
    _phi_sq: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.psi_embeddings.shape[0]
        if n == 0:
            raise ValidationError("cannot index an empty dataset")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.phi_embeddings.shape[0] != n or self.neighbor_ids.shape != (n, min(self.k, n)):
            raise ValidationError("index arrays are inconsistent")
        # Duplicate query states (common with one-hot encodings) share one
        # tree node; members stay index-sorted for the tie rule.
        unique, inverse = np.unique(self.psi_embeddings, axis=0, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(unique) + 1))
        self._group_members = [order[bounds[u] : bounds[u + 1]] for u in range(len(unique))]
        self._group_sizes = np.diff(bounds)
        self._single_member = np.where(
            self._group_sizes == 1, np.concatenate([g[:1] for g in self._group_members]), -1
        )
        self._unique_sq = np.sum(unique * unique, axis=1)
        self._phi_sq = np.sum(self.phi_embeddings * self.phi_embeddings, axis=1)
        self._tree = cKDTree(unique)

    @property
    def n(self) -> int:
        return self.psi_embeddings.shape[0]

    @property
    def k_effective(self) -> int:
        return min(self.k, self.n)


def _nearest_rows(idx: NeighborIndex, q: np.ndarray, keff: int) -> np.ndarray:
    """Dataset rows nearest to one embedded query, sorted by (distance, index)."""
    unique = idx._tree.data
    n_unique = len(unique)
    if n_unique <= keff:
        cand_u = np.arange(n_unique)
    else:
        dists, _ = idx._tree.query(q, k=keff)
        cutoff = float(np.atleast_1d(dists)[-1])
        cand_u = np.array(idx._tree.query_ball_point(q, cutoff * (1.0 + _RADIUS_SLACK) + 1e-300))
    du = np.sqrt(np.sum((unique[cand_u] - q) ** 2, axis=1))
    ids = np.concatenate([idx._group_members[u] for u in cand_u])
    d_ids = np.repeat(du, idx._group_sizes[cand_u])
    order = np.lexsort((ids, d_ids))
    return ids[order[:keff]]


def _query_batch_embedded(idx: NeighborIndex, qs: np.ndarray) -> np.ndarray:
    """Candidate rows for embedded queries; exact, vectorized where safe.

    Unique embeddings are ranked by the expansion |u|^2 - 2 q.u (one BLAS
    product per batch). A query row keeps the fast answer only when every
    shortlisted group is a singleton and the shortlist boundary gap exceeds
    the expansion's worst-case rounding error; other rows rerun the per-row
    tree search, so both paths return identical candidates.
    """
    keff = idx.k_effective
    unique = idx._tree.data
    n_unique = len(unique)
    out = np.empty((len(qs), keff), dtype=np.int64)
    if n_unique <= keff + 1:
        for i, q in enumerate(qs):
            out[i] = _nearest_rows(idx, q, keff)
        return out
    d2 = idx._unique_sq[None, :] - 2.0 * (qs @ unique.T)
    kq = keff + 1
    part = np.argpartition(d2, kq - 1, axis=1)[:, :kq]
    pd2 = np.take_along_axis(d2, part, axis=1)
    order = np.argsort(pd2, axis=1, kind="stable")
    part = np.take_along_axis(part, order, axis=1)
    pd2 = np.take_along_axis(pd2, order, axis=1)
    short = part[:, :keff]
    ids = idx._single_member[short]
    scale = np.sum(qs * qs, axis=1) + np.abs(pd2[:, keff - 1]) + 1.0
    safe = np.all(ids >= 0, axis=1) & (pd2[:, keff] > pd2[:, keff - 1] + 1e-9 * scale)
    rows = np.nonzero(safe)[0]
    if len(rows):
        diffs = unique[short[rows]] - qs[rows, None, :]
        direct = np.sqrt(np.sum(diffs * diffs, axis=2))
        sub = np.lexsort((ids[rows], direct))
        out[rows] = np.take_along_axis(ids[rows], sub, axis=1)
    for i in np.nonzero(~safe)[0]:
        out[i] = _nearest_rows(idx, qs[i], keff)
    return out


def query_candidates(idx: NeighborIndex, s: np.ndarray) -> np.ndarray:
    """Candidate dataset rows for one (possibly unseen) query state."""
    q = embed_psi(idx.embedder.psi, np.asarray(s, dtype=np.float64)[None, :])[0]
    return _nearest_rows(idx, q, idx.k_effective)


def query_candidates_batch(idx: NeighborIndex, s: np.ndarray) -> np.ndarray:
    """Candidate rows for each of B query states, shape (B, k_effective)."""
    qs = _embed_all_states(idx.embedder, np.asarray(s, dtype=np.float64))
    # Chunk so the B x n_unique expansion matrix stays modest.
    chunk = max(1, 8_000_000 // max(1, len(idx._tree.data)))
    parts = [_query_batch_embedded(idx, qs[i : i + chunk]) for i in range(0, len(qs), chunk)]
    return np.concatenate(parts, axis=0)


def build_neighbor_index(pair: EmbedderPair, d: TransitionDataset, k: int) -> NeighborIndex:
    """Exact k-nearest candidate lists for every dataset state.

    Duplicate states share a query, so neighbor lists are computed once per
    distinct embedding. The PLOFF_THREADS env var caps build workers; the
    result does not depend on the worker count.
    """
    if d.n == 0:
        raise ValidationError("cannot index an empty dataset")
    if k < 1:
        raise ValidationError("k must be >= 1")
    psi_emb = _embed_all_states(pair, d.s)
    phi_emb = _embed_all_pairs(pair, d.s, d.a)
    keff = min(k, d.n)
    idx = NeighborIndex(
        k=k,
        embedder=pair,
        psi_embeddings=psi_emb,
        phi_embeddings=phi_emb,
        neighbor_ids=np.zeros((d.n, keff), dtype=np.int64),
    )
    unique = np.asarray(idx._tree.data)
    per_unique = np.empty((len(unique), keff), dtype=np.int64)

    def fill(block: slice) -> None:
        per_unique[block] = _query_batch_embedded(idx, unique[block])

    workers = worker_count()
    step = max(1, min(512, 8_000_000 // len(unique)))
    blocks = [slice(b, min(b + step, len(unique))) for b in range(0, len(unique), step)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, blocks))
    else:
        for block in blocks:
            fill(block)

    for u, members in enumerate(idx._group_members):
        idx.neighbor_ids[members] = per_unique[u]
    return idx


def _phi_query(pair: EmbedderPair, s: np.ndarray, a: np.ndarray):
    x = np.concatenate([np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64)], axis=1)
    return forward(pair.phi, x)


def _projection_argmin(
    idx: NeighborIndex,
    pair: EmbedderPair,
    s: np.ndarray,
    a: np.ndarray,
    cand_ids: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, object]:
    """Projection distances plus the argmin candidate per query row.

    cand_ids short-circuits the state lookup with precomputed candidate
    rows (one row of ids per query); training loops use this because their
    queries are always dataset states whose candidates never change.
    """
    if cand_ids is None:
        cands = query_candidates_batch(idx, s)
    else:
        cands = np.asarray(cand_ids, dtype=np.int64)
        if cands.shape != (len(s), idx.k_effective):
            raise ValidationError("candidate ids have the wrong shape for this batch")
    emb, cache = _phi_query(pair, s, a)
    # Rank by the squared-norm expansion (one batched GEMV), then measure the
    # winner directly; duplicate candidates expand identically, so ties still
    # resolve to the first (lowest-ranked) candidate.
    gathered = idx.phi_embeddings[cands]
    dots = (gathered @ emb[:, :, None])[:, :, 0]
    d2 = idx._phi_sq[cands] - 2.0 * dots
    best = np.argmin(d2, axis=1)
    rows = np.arange(len(best))
    diff = emb - gathered[rows, best]
    dists = np.sqrt(np.sum(diff * diff, axis=1))
    return dists, cands[rows, best], emb, cache


def projection_distance(idx: NeighborIndex, pair: EmbedderPair, s, a, cand_ids=None):
    """Min d_phi from (s, a) to the candidate rows of s; scalar in, scalar out."""
    s_arr = np.asarray(s, dtype=np.float64)
    single = s_arr.ndim == 1
    s2 = s_arr[None, :] if single else s_arr
    a2 = np.asarray(a, dtype=np.float64)
    a2 = a2[None, :] if single else a2
    d, _, _, _ = _projection_argmin(idx, pair, s2, a2, cand_ids)
    return float(d[0]) if single else d


def projection_distance_action_grad(
    idx: NeighborIndex,
    pair: EmbedderPair,
    s: np.ndarray,
    a: np.ndarray,
    cand_ids: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batch projection distances and their gradients w.r.t. the actions.

    The argmin candidate is held fixed during differentiation; at distance
    zero the zero subgradient is returned.
    """
    d, best, emb, cache = _projection_argmin(idx, pair, s, a, cand_ids)
    diff = emb - idx.phi_embeddings[best]
    safe = np.where(d > 0.0, d, 1.0)
    unit = diff / safe[:, None]
    unit[d == 0.0] = 0.0
    _, grad_in = backward(pair.phi, cache, unit)
    return d, grad_in[:, s.shape[1] :]


def bonus_from_distance(spec: BonusSpec, d: np.ndarray, q: np.ndarray | None = None) -> np.ndarray:
    if spec.form == "exp":
        return np.exp(-spec.beta * d)
    if spec.form == "one_minus_exp":
        return 1.0 - np.exp(spec.beta * d)
    if q is None:
        raise ValidationError("q_scaled_exp bonus requires a critic evaluator")
    return q * np.exp(-spec.beta * d)


def bonus(
    idx: NeighborIndex,
    pair: EmbedderPair,
    spec: BonusSpec,
    s,
    a,
    critic_target: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    cand_ids: np.ndarray | None = None,
):
    """Lookup bonus at (s, a); accepts one pair or a batch."""
    s_arr = np.asarray(s, dtype=np.float64)
    single = s_arr.ndim == 1
    s2 = s_arr[None, :] if single else s_arr
    a2 = np.asarray(a, dtype=np.float64)
    a2 = a2[None, :] if single else a2
    d = projection_distance(idx, pair, s2, a2, cand_ids)
    q = None
    if spec.form == "q_scaled_exp":
        if critic_target is None:
            raise ValidationError("q_scaled_exp bonus requires a critic evaluator")
        q = np.asarray(critic_target(s2, a2), dtype=np.float64).reshape(len(s2))
    b = bonus_from_distance(spec, d, q)
    return float(b[0]) if single else b


def bonus_action_grad(
    idx: NeighborIndex,
    pair: EmbedderPair,
    spec: BonusSpec,
    s: np.ndarray,
    a: np.ndarray,
    critic_target: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    critic_action_grad: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    cand_ids: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batch bonus values and gradients w.r.t. actions (argmin frozen).

    For the critic-scaled form the product rule needs the critic's own
    action gradient; the exp factor's gradient flows through the metric.
    """
    d, dd_da = projection_distance_action_grad(idx, pair, s, a, cand_ids)
    decay = np.exp(-spec.beta * d)
    if spec.form == "exp":
        return decay, (-spec.beta * decay)[:, None] * dd_da
    if spec.form == "one_minus_exp":
        grow = np.exp(spec.beta * d)
        return 1.0 - grow, (-spec.beta * grow)[:, None] * dd_da
    if critic_target is None or critic_action_grad is None:
        raise ValidationError("q_scaled_exp bonus requires critic value and gradient evaluators")
    q = np.asarray(critic_target(s, a), dtype=np.float64).reshape(len(s))
    dq_da = np.asarray(critic_action_grad(s, a), dtype=np.float64)
    val = q * decay
    grad = dq_da * decay[:, None] + (q * -spec.beta * decay)[:, None] * dd_da
    return val, grad


def save_neighbor_index(path: str | Path, idx: NeighborIndex, metric_hash: str) -> None:
    """Persist ids and cached embeddings; the tree is rebuilt on load."""
    header = {
        "version": NEIGHBOR_VERSION,
        "k": idx.k,
        "n": idx.n,
        "state_dim": idx.embedder.state_dim,
        "action_dim": idx.embedder.action_dim,
        "psi_embed_dim": int(idx.psi_embeddings.shape[1]),
        "phi_embed_dim": int(idx.phi_embeddings.shape[1]),
        "metric_hash": metric_hash,
    }
    with open(path, "wb") as fh:
        write_header(fh, NEIGHBOR_MAGIC, header)
        write_tensor(fh, "neighbor_ids", idx.neighbor_ids, "uint32")
        write_tensor(fh, "psi_embeddings", idx.psi_embeddings, "float64")
        write_tensor(fh, "phi_embeddings", idx.phi_embeddings, "float64")


def load_neighbor_index(
    path: str | Path, pair: EmbedderPair, expect_metric_hash: str | None = None
) -> tuple[NeighborIndex, dict]:
    with open(path, "rb") as fh:
        header = read_header(fh, NEIGHBOR_MAGIC)
        if header.get("version") != NEIGHBOR_VERSION:
            raise DataFormatError(f"unsupported index version {header.get('version')!r}")
        if expect_metric_hash is not None and header.get("metric_hash") != expect_metric_hash:
            raise ValidationError("index was built from a different metric checkpoint")
        if header.get("state_dim") != pair.state_dim or header.get("action_dim") != pair.action_dim:
            raise ValidationError("index dimensions do not match the embedder")
        names = {}
        for key, dtype in (("neighbor_ids", "uint32"), ("psi_embeddings", "float64"), ("phi_embeddings", "float64")):
            name, arr = read_tensor(fh, dtype)
            if name != key:
                raise DataFormatError(f"index tensor order mismatch: {name!r} != {key!r}")
            names[key] = arr
        if fh.read(1):
            raise DataFormatError("trailing bytes after index tensors")
    idx = NeighborIndex(
        k=int(header["k"]),
        embedder=pair,
        psi_embeddings=names["psi_embeddings"],
        phi_embeddings=names["phi_embeddings"],
        neighbor_ids=names["neighbor_ids"].astype(np.int64),
    )
    if idx.n != int(header["n"]):
        raise DataFormatError("index row count does not match its header")
    return idx, header
