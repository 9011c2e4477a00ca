"""Figure data: distance heatmaps over grid maps and noise-perturbation curves.

These produce plain arrays/rows; rendering is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TransitionDataset
from .envs import GridMap, state_one_hot
from .errors import ValidationError
from .metric import EmbedderPair, d_phi, d_psi
from .seeding import substream


@dataclass
class HeatmapRow:
    row: int
    col: int
    is_wall: bool
    d_psi: float


def psi_heatmap(pair: EmbedderPair, grid: GridMap, anchor: tuple[int, int]) -> list[HeatmapRow]:
    """d_psi from every grid cell to the anchor cell (one-hot encodings)."""
    ar, ac = anchor
    if not (0 <= ar < grid.rows and 0 <= ac < grid.cols):
        raise ValidationError(f"anchor {anchor} outside the {grid.rows}x{grid.cols} grid")
    if grid.is_wall(ar, ac):
        raise ValidationError("anchor is a wall cell")
    n = grid.rows * grid.cols
    if pair.state_dim != n:
        raise ValidationError("metric state dim does not match the map")
    anchor_vec = state_one_hot(ar * grid.cols + ac, n)
    states = np.stack([state_one_hot(i, n) for i in range(n)])
    anchors = np.tile(anchor_vec, (n, 1))
    dists = d_psi(pair, states, anchors)
    out = []
    for i in range(n):
        r, c = divmod(i, grid.cols)
        out.append(HeatmapRow(row=r, col=c, is_wall=grid.is_wall(r, c), d_psi=float(dists[i])))
    return out


DEFAULT_LAMBDAS = (0.0, 0.05, 0.1, 0.2, 0.4)
NOISE_KINDS = ("state", "action")


def noise_distance_matrix(
    pair: EmbedderPair,
    dataset: TransitionDataset,
    kind: str,
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS,
    n_pairs: int = 100,
    seed: int = 0,
) -> np.ndarray:
    """d_phi between dataset rows and their noise-perturbed copies.

    One standard-normal direction is drawn per sampled row and reused across
    the whole lambda grid, so each row traces a ray through input space.
    Returns (n_pairs, len(lambdas)).
    """
    if kind not in NOISE_KINDS:
        raise ValidationError(f"unknown perturbation kind {kind!r}")
    if n_pairs < 1 or len(lambdas) < 1:
        raise ValidationError("need at least one pair and one lambda")
    rng = substream(seed, f"noise-{kind}")
    rows = rng.integers(0, dataset.n, size=n_pairs)
    s = dataset.s[rows]
    a = dataset.a[rows]
    dim = dataset.state_dim if kind == "state" else dataset.action_dim
    nu = rng.standard_normal((n_pairs, dim))
    out = np.zeros((n_pairs, len(lambdas)))
    for j, lam in enumerate(lambdas):
        if kind == "state":
            out[:, j] = d_phi(pair, s, a, s + lam * nu, a)
        else:
            out[:, j] = d_phi(pair, s, a, s, a + lam * nu)
    return out


@dataclass
class NoiseSummaryRow:
    kind: str
    lam: float
    mean: float
    q25: float
    q50: float
    q75: float


def noise_summary(
    pair: EmbedderPair,
    dataset: TransitionDataset,
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS,
    n_pairs: int = 100,
    seed: int = 0,
) -> list[NoiseSummaryRow]:
    """Per-lambda distance quantiles for state and action perturbations."""
    rows = []
    for kind in NOISE_KINDS:
        mat = noise_distance_matrix(pair, dataset, kind, lambdas, n_pairs, seed)
        for j, lam in enumerate(lambdas):
            col = mat[:, j]
            rows.append(
                NoiseSummaryRow(
                    kind=kind,
                    lam=float(lam),
                    mean=float(np.mean(col)),
                    q25=float(np.quantile(col, 0.25)),
                    q50=float(np.quantile(col, 0.5)),
                    q75=float(np.quantile(col, 0.75)),
                )
            )
    return rows
