"""Pipeline driver: data generation through training, evaluation, and checks.

Each subcommand is an independent process step; artifacts chain through
files (PLDS1 datasets, PLCK1 checkpoints, PLNN1 indexes) and every chained
pair is dimension- and hash-checked before compute starts. Exit codes:
0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .agent import (
    AgentTrainConfig,
    evaluate_policy,
    hyperparameter_sweep,
    load_agent,
    save_agent,
    train_agent,
)
from .data import (
    collect_qlearning_dataset,
    collect_scripted_dataset,
    load_dataset,
    scale_rewards,
    save_dataset,
    TransitionDataset,
)
from .envs import (
    ActionSpace,
    box_space,
    build_gridworld,
    build_pointmass,
    builtin_map,
    discrete_space,
    GridMap,
    load_map,
)
from .errors import (
    ConvergenceError,
    DivergenceError,
    NonFiniteError,
    ValidationError,
)
from .figures import noise_summary, psi_heatmap
from .io import file_sha256
from .metric import MetricTrainConfig, load_embedders, save_embedders, train_metric
from .neighbors import BonusSpec, build_neighbor_index, load_neighbor_index, save_neighbor_index
from .verify import run_all_suites


class _Parser(argparse.ArgumentParser):
    """argparse that reports flag problems as validation errors (exit 1)."""

    def error(self, message):
        raise ValidationError(message)


def _ensure_parent(path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


def _resolve_map(name: str) -> GridMap:
    p = Path(name)
    if p.exists():
        return load_map(p)
    return builtin_map(p.stem)


def _dataset_action_space(ds: TransitionDataset) -> ActionSpace:
    """Infer the sampling support from the environment the data came from."""
    if ds.env_id.startswith("gridworld"):
        return discrete_space(ds.action_dim)
    if ds.env_id.startswith("pointmass"):
        return box_space(np.full(ds.action_dim, -1.0), np.full(ds.action_dim, 1.0))
    raise ValidationError(
        f"cannot infer an action space for env_id {ds.env_id!r}; "
        "pass --action-kind with bounds"
    )


def _action_space_from_flags(ds: TransitionDataset, args) -> ActionSpace:
    kind = getattr(args, "action_kind", None)
    if kind is None:
        return _dataset_action_space(ds)
    if kind == "discrete":
        return discrete_space(ds.action_dim)
    return box_space(
        np.full(ds.action_dim, args.action_low),
        np.full(ds.action_dim, args.action_high),
    )


def _check_metric_matches_dataset(pair, ds: TransitionDataset) -> None:
    if pair.state_dim != ds.state_dim or pair.action_dim != ds.action_dim:
        raise ValidationError(
            f"metric dims ({pair.state_dim}, {pair.action_dim}) do not match "
            f"dataset dims ({ds.state_dim}, {ds.action_dim})"
        )


def cmd_gen_data(args) -> int:
    if args.env == "gridworld":
        grid = _resolve_map(args.map)
        mdp = build_gridworld(grid, time_limit=args.time_limit_grid)
        raw = collect_qlearning_dataset(
            mdp, episodes=args.episodes, epsilon=args.epsilon, gamma=args.gamma, seed=args.seed
        )
    else:
        env = build_pointmass(dt=args.dt, time_limit=args.time_limit)
        raw = collect_scripted_dataset(
            env,
            args.policy,
            noise_scale=args.noise_scale,
            episodes=args.episodes,
            seed=args.seed,
        )
    ds = scale_rewards(raw)
    _ensure_parent(args.out)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n} transitions ({ds.env_id}) to {args.out}")
    return 0


def cmd_train_metric(args) -> int:
    ds = load_dataset(args.data)
    space = _action_space_from_flags(ds, args)
    cfg = MetricTrainConfig(
        action_space=space,
        steps=args.steps,
        learning_rate=args.learning_rate,
        batch=args.batch,
        n_action_samples=args.n_action_samples,
        tau=args.tau,
        gamma=args.gamma,
        seed=args.seed,
        hidden_dim=args.hidden_dim,
        embed_dim=args.embed_dim,
        independent_actions=args.independent_actions,
    )
    pair, log = train_metric(ds, cfg)
    _ensure_parent(args.out)
    save_embedders(args.out, pair, extra_meta={"env_id": ds.env_id, "seed": args.seed, "steps": args.steps})
    loss_csv = args.loss_csv or args.out + ".loss.csv"
    _ensure_parent(loss_csv)
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss_phi", "loss_psi"])
        for row in log.rows():
            w.writerow(row)
    print(f"wrote metric checkpoint to {args.out} and losses to {loss_csv}")
    return 0


def cmd_build_knn(args) -> int:
    ds = load_dataset(args.data)
    pair, _ = load_embedders(args.metric)
    _check_metric_matches_dataset(pair, ds)
    idx = build_neighbor_index(pair, ds, args.k)
    _ensure_parent(args.out)
    save_neighbor_index(args.out, idx, metric_hash=file_sha256(args.metric))
    print(f"wrote index (k={args.k}, n={idx.n}) to {args.out}")
    return 0


def _agent_box_flags(ds: TransitionDataset, args) -> tuple[tuple[float, ...], tuple[float, ...]] | None:
    if args.action_low is not None and args.action_high is not None:
        return (
            tuple(np.full(ds.action_dim, args.action_low)),
            tuple(np.full(ds.action_dim, args.action_high)),
        )
    if ds.env_id.startswith("pointmass"):
        return tuple(np.full(ds.action_dim, -1.0)), tuple(np.full(ds.action_dim, 1.0))
    return None


def _load_agent_inputs(args, ds: TransitionDataset):
    if args.variant != "ploff":
        return None, None
    if not args.metric or not args.index:
        raise ValidationError("variant ploff needs --metric and --index")
    pair, _ = load_embedders(args.metric)
    _check_metric_matches_dataset(pair, ds)
    idx, _ = load_neighbor_index(args.index, pair, expect_metric_hash=file_sha256(args.metric))
    if idx.n != ds.n:
        raise ValidationError(f"index holds {idx.n} rows but the dataset has {ds.n}")
    return pair, idx


def _agent_config(args, ds: TransitionDataset) -> AgentTrainConfig:
    box = _agent_box_flags(ds, args)
    return AgentTrainConfig(
        bonus=BonusSpec(
            form=args.bonus_form,
            beta=args.beta,
            alpha_actor=args.alpha_a,
            alpha_critic=args.alpha_c,
        ),
        variant=args.variant,
        steps=args.steps,
        batch=args.batch,
        policy_delay=args.policy_delay,
        learning_rate=args.learning_rate,
        gamma=args.gamma,
        tau=args.tau,
        hidden_dim=args.hidden_dim,
        seed=args.seed,
        k=args.k,
        single_critic=args.single_critic,
        target_policy_noise=args.target_policy_noise,
        action_low=box[0] if box else None,
        action_high=box[1] if box else None,
    )


def cmd_train_agent(args) -> int:
    ds = load_dataset(args.data)
    pair, idx = _load_agent_inputs(args, ds)
    cfg = _agent_config(args, ds)
    agent, log = train_agent(ds, cfg, metric=pair, idx=idx)
    _ensure_parent(args.out)
    save_agent(
        args.out,
        agent,
        extra_meta={"variant": args.variant, "seed": args.seed, "env_id": ds.env_id},
    )
    if args.log_csv:
        _ensure_parent(args.log_csv)
        with open(args.log_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "critic_loss", "actor_objective", "mean_bonus"])
            for row in log.rows():
                w.writerow(row)
    print(f"wrote agent checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    agent, _ = load_agent(args.agent)
    env = build_pointmass(dt=args.dt, time_limit=args.time_limit)
    report = evaluate_policy(env, agent, episodes=args.episodes, seed=args.seed)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        _ensure_parent(args.out)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    ds = load_dataset(args.data)
    pair, idx = _load_agent_inputs(args, ds)
    cfg = _agent_config(args, ds)
    grid = [(a, c, b) for a in _floats(args.grid_alpha_a) for c in _floats(args.grid_alpha_c) for b in _floats(args.grid_beta)]
    env = build_pointmass(dt=args.dt, time_limit=args.time_limit)
    rows = hyperparameter_sweep(ds, pair, idx, grid, cfg, env, eval_episodes=args.episodes)
    _ensure_parent(args.out)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha_a", "alpha_c", "beta", "seed", "mean_return", "normalized_score"])
        for r in rows:
            w.writerow([r.alpha_a, r.alpha_c, r.beta, r.seed, r.mean_return, r.normalized_score])
    print(f"wrote {len(rows)} ranked sweep rows to {args.out}")
    return 0


def cmd_export_figures(args) -> int:
    if args.what == "heatmap":
        if not args.metric or not args.map:
            raise ValidationError("heatmap export needs --metric and --map")
        grid = _resolve_map(args.map)
        pair, _ = load_embedders(args.metric)
        if args.anchor:
            parts = args.anchor.split(",")
            if len(parts) != 2:
                raise ValidationError("anchor must be 'row,col'")
            anchor = (int(parts[0]), int(parts[1]))
        else:
            anchor = grid.goal_cell()
        rows = psi_heatmap(pair, grid, anchor)
        _ensure_parent(args.out)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "is_wall", "d_psi"])
            for r in rows:
                w.writerow([r.row, r.col, int(r.is_wall), r.d_psi])
    elif args.what == "curves":
        if not args.loss_csv:
            raise ValidationError("curves export needs --loss-csv")
        with open(args.loss_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["step", "loss_phi", "loss_psi"]:
            raise ValidationError("loss CSV has an unexpected header")
        _ensure_parent(args.out)
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    else:
        if not args.metric or not args.data:
            raise ValidationError("noise export needs --metric and --data")
        pair, _ = load_embedders(args.metric)
        ds = load_dataset(args.data)
        _check_metric_matches_dataset(pair, ds)
        rows = noise_summary(
            pair, ds, lambdas=_floats(args.lambdas), n_pairs=args.pairs, seed=args.seed
        )
        _ensure_parent(args.out)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "lambda", "mean", "q25", "q50", "q75"])
            for r in rows:
                w.writerow([r.kind, r.lam, r.mean, r.q25, r.q50, r.q75])
    print(f"wrote {args.what} data to {args.out}")
    return 0


def cmd_verify(args) -> int:
    results = run_all_suites(quick=args.quick)
    all_ok = True
    for suite in results:
        status = "ok" if suite.ok else "FAIL"
        print(f"{suite.name}: {suite.passed} passed, {suite.failed} failed [{status}]")
        if not suite.ok:
            all_ok = False
            for label, ok in suite.cases:
                if not ok:
                    print(f"  FAIL {label}")
    return 0 if all_ok else 2


def _add_agentish_flags(p: _Parser, default_steps: int) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=["ploff", "td3_off", "ploff_l2"], default="ploff")
    p.add_argument("--metric")
    p.add_argument("--index")
    p.add_argument("--bonus-form", choices=["q_scaled_exp", "exp", "one_minus_exp"], default="q_scaled_exp")
    p.add_argument("--alpha-a", type=float, default=5.0)
    p.add_argument("--alpha-c", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=default_steps)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--policy-delay", type=int, default=2)
    p.add_argument("--learning-rate", type=float, default=3e-4)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--tau", type=float, default=0.005)
    p.add_argument("--hidden-dim", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--single-critic", action="store_true")
    p.add_argument("--target-policy-noise", type=float, default=0.0)
    p.add_argument("--action-low", type=float, default=None)
    p.add_argument("--action-high", type=float, default=None)
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--time-limit", type=int, default=100)


def build_parser() -> _Parser:
    parser = _Parser(prog="ploff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect and scale an offline dataset")
    p.add_argument("--env", choices=["gridworld", "pointmass"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--map", default="two_room.txt")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--time-limit-grid", type=int, default=50)
    p.add_argument("--policy", choices=["random", "medium", "expert", "mixture"], default="medium")
    p.add_argument("--noise-scale", type=float, default=0.0)
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--time-limit", type=int, default=100)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-metric", help="train the Siamese metric on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.add_argument("--steps", type=int, default=2_000_000)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--n-action-samples", type=int, default=256)
    p.add_argument("--tau", type=float, default=0.005)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-dim", type=int, default=1024)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--independent-actions", action="store_true")
    p.add_argument("--action-kind", choices=["discrete", "box"], default=None)
    p.add_argument("--action-low", type=float, default=-1.0)
    p.add_argument("--action-high", type=float, default=1.0)
    p.set_defaults(func=cmd_train_metric)

    p = sub.add_parser("build-knn", help="build the neighbor candidate index")
    p.add_argument("--data", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=50)
    p.set_defaults(func=cmd_build_knn)

    p = sub.add_parser("train-agent", help="train an offline agent")
    _add_agentish_flags(p, default_steps=500_000)
    p.add_argument("--out", required=True)
    p.add_argument("--log-csv")
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("eval", help="evaluate an agent checkpoint")
    p.add_argument("--agent", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--time-limit", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid search over bonus hyperparameters")
    _add_agentish_flags(p, default_steps=50_000)
    p.add_argument("--grid-alpha-a", default="1,5,10")
    p.add_argument("--grid-alpha-c", default="1,5,10")
    p.add_argument("--grid-beta", default="0.1,0.25,0.5")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-figures", help="export heatmap/curve/noise figure data")
    p.add_argument("--what", choices=["heatmap", "curves", "noise"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric")
    p.add_argument("--map", default="two_room.txt")
    p.add_argument("--anchor")
    p.add_argument("--loss-csv")
    p.add_argument("--data")
    p.add_argument("--lambdas", default="0,0.05,0.1,0.2,0.4")
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_figures)

    p = sub.add_parser("verify", help="run the property-check suites")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConvergenceError, DivergenceError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
