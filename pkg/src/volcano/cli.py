"""Command-line entry points: run, compare-plans, and meta-store tooling.

Exit codes: 0 success, 2 usage/configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
import time
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import meta as meta_mod
from .data import DataError, load_dataset
from .ensemble import (
    DEFAULT_ENSEMBLE_SIZE,
    DEFAULT_TOP_PER_ALGORITHM,
    ModelPool,
    ensemble_select,
)
from .history import write_history
from .learners import EvaluationFailed
from .objective import (
    EvaluationTimeout,
    Objective,
    ObjectiveError,
    PipelineObjective,
    builtin_objective,
    make_pipeline_objective,
    synthetic_suite,
)
from .plan import (
    PlanError,
    PlanSpec,
    RunError,
    RunResult,
    build_plan,
    enumerate_plans,
    run,
    run_progressive,
)
from .space import SpaceError, load_space

RANK_TIE_TOLERANCE = 1e-6


class ConfigError(ValueError):
    """Bad flags or run-config document (exit code 2)."""


# -- run configuration -----------------------------------------------------------


@dataclass
class RunConfig:
    """Everything one run needs: objective source, plan, budget, seed, extras."""

    benchmark: str | None = None
    dataset: str | None = None
    metric: str | None = None
    external_command: str | None = None
    external_space: str | None = None
    plan: str = "CA"
    budget_evals: int | None = None
    budget_seconds: float | None = None
    seed: int = 0
    meta_store: str | None = None
    meta_mode: str | None = None
    meta_k: int = 5
    ensemble_size: int | None = None
    ensemble_n_top: int = DEFAULT_TOP_PER_ALGORITHM
    out: str = "history.jsonl"

    def validate(self) -> None:
        sources = [
            self.benchmark is not None,
            self.dataset is not None,
            self.external_command is not None,
        ]
        if sum(sources) != 1:
            raise ConfigError(
                "exactly one objective source (benchmark, dataset, or external command) required"
            )
        if self.dataset is not None and self.metric is None:
            raise ConfigError("a dataset objective needs --metric")
        if self.external_command is not None and self.external_space is None:
            raise ConfigError("an external objective needs a space file")
        budgets = [self.budget_evals is not None, self.budget_seconds is not None]
        if sum(budgets) != 1:
            raise ConfigError("exactly one budget (evals or seconds) required")
        if self.budget_evals is not None and self.budget_evals <= 0:
            raise ConfigError("budget must be positive")
        if self.budget_seconds is not None and self.budget_seconds <= 0:
            raise ConfigError("budget must be positive")
        if self.meta_store is not None and self.meta_mode not in (
            "rgpe_joint", "ranknet_conditioning",
        ):
            raise ConfigError("meta store needs --meta-mode rgpe_joint|ranknet_conditioning")

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read run config {path!r}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"run config {path!r}: invalid JSON at line {exc.lineno}") from None
        cfg = cls()
        objective = doc.get("objective", {})
        cfg.benchmark = objective.get("benchmark")
        if "dataset" in objective:
            cfg.dataset = objective["dataset"]
            cfg.metric = objective.get("metric")
        if "external" in objective:
            cfg.external_command = objective["external"].get("command")
            cfg.external_space = objective["external"].get("space")
        cfg.plan = doc.get("plan", "CA")
        budget = doc.get("budget", {})
        cfg.budget_evals = budget.get("evals")
        cfg.budget_seconds = budget.get("seconds")
        cfg.seed = int(doc.get("seed", 0))
        meta = doc.get("meta") or {}
        cfg.meta_store = meta.get("store")
        cfg.meta_mode = meta.get("mode")
        cfg.meta_k = int(meta.get("k", 5))
        ens = doc.get("ensemble") or {}
        cfg.ensemble_size = ens.get("size")
        cfg.ensemble_n_top = int(ens.get("n_top", DEFAULT_TOP_PER_ALGORITHM))
        cfg.out = doc.get("out", "history.jsonl")
        cfg.validate()
        return cfg


def _external_objective(command: str, space_path: str) -> Objective:
    """Wrap a command template: config JSON on stdin, {"loss": x} on stdout."""
    space = load_space(space_path)

    def eval_fn(config: dict[str, Any], fidelity: float, seed: int) -> float:
        payload = json.dumps({**config, "_fidelity": fidelity, "_seed": seed})
        try:
            proc = subprocess.run(
                command, shell=True, input=payload, capture_output=True, text=True,
            )
        except subprocess.TimeoutExpired:
            raise EvaluationTimeout(command) from None
        if proc.returncode != 0:
            raise EvaluationFailed(f"external command exited {proc.returncode}")
        try:
            loss = json.loads(proc.stdout.strip().splitlines()[-1])["loss"]
        except (json.JSONDecodeError, KeyError, IndexError):
            raise EvaluationFailed("external command printed no {'loss': ...} object") from None
        return float(loss)

    return Objective(
        space=space, eval_fn=eval_fn, name=f"external[{space.name}]",
        loss_lower_bound=None,
        feature_vars=tuple(space.names), hyper_vars=(),
    )


def build_objective(cfg: RunConfig) -> Objective:
    if cfg.benchmark is not None:
        try:
            return builtin_objective(cfg.benchmark)
        except ObjectiveError as exc:
            raise ConfigError(str(exc)) from None
    if cfg.dataset is not None:
        if not os.path.exists(cfg.dataset):
            raise ConfigError(f"dataset path {cfg.dataset!r} does not exist")
        try:
            dataset = load_dataset(cfg.dataset)
            return make_pipeline_objective(dataset, cfg.metric, seed=cfg.seed)
        except (DataError, ObjectiveError) as exc:
            raise ConfigError(str(exc)) from None
    try:
        return _external_objective(cfg.external_command, cfg.external_space)
    except (SpaceError, OSError) as exc:
        raise ConfigError(f"external objective: {exc}") from None


# -- run command -----------------------------------------------------------------


def _execute_run(cfg: RunConfig, objective: Objective) -> RunResult:
    if cfg.plan == "CA-progressive":
        if cfg.budget_evals is None:
            raise ConfigError("CA-progressive needs an evaluation budget")
        return run_progressive(objective, cfg.budget_evals, seed=cfg.seed)
    spec = PlanSpec.from_objective(cfg.plan, objective)
    root = build_plan(spec, objective, seed=cfg.seed)
    if cfg.meta_store is not None:
        store = meta_mod.load_meta_store(cfg.meta_store)
        meta_mod.attach_meta(root, store, cfg.meta_mode, k=cfg.meta_k)
    return run(root, evals=cfg.budget_evals, seconds=cfg.budget_seconds)


def _build_run_ensemble(cfg: RunConfig, objective: PipelineObjective,
                        result: RunResult) -> dict[str, Any]:
    """Retrain the top configurations per algorithm and greedily select an ensemble."""
    pool = ModelPool(n_top=cfg.ensemble_n_top)
    by_algo: dict[str, list] = {}
    for rec in result.history:
        if rec.status != "ok":
            continue
        by_algo.setdefault(rec.config[objective.algo_var], []).append(rec)
    for algo in sorted(by_algo):
        ranked = sorted(by_algo[algo], key=lambda r: (r.loss, r.iter))
        seen: list[dict] = []
        for rec in ranked:
            if rec.config in seen:
                continue
            seen.append(rec.config)
            if len(seen) > cfg.ensemble_n_top:
                break
            predictions = objective.valid_predictions(rec.config)
            utility = -rec.loss if objective.metric == "mse" else 1.0 - rec.loss
            pool.record(algo, rec.config, predictions, utility)
    size = cfg.ensemble_size or DEFAULT_ENSEMBLE_SIZE
    weights = ensemble_select(pool, size=size, metric=objective.metric,
                              labels=objective.valid.labels)
    member_idx = [i for i, c in enumerate(weights.counts) if c > 0]
    return {
        "size": int(weights.size),
        "members": [
            {"algorithm": pool.entries[i].algorithm,
             "config": pool.entries[i].config,
             "count": int(weights.counts[i])}
            for i in member_idx
        ],
    }


def cmd_run(cfg: RunConfig) -> int:
    cfg.validate()
    objective = build_objective(cfg)
    result = _execute_run(cfg, objective)
    write_history(cfg.out, result.history)
    summary: dict[str, Any] = {
        "best_config": result.best_config,
        "best_loss": result.best_loss,
        "evaluations": result.evaluations,
        "wall_s": result.wall_seconds,
    }
    if cfg.ensemble_size is not None:
        if not isinstance(objective, PipelineObjective):
            raise ConfigError("ensembles need a dataset objective")
        summary["ensemble"] = _build_run_ensemble(cfg, objective, result)
    with open(cfg.out + ".summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary))
    return 0


# -- report math -----------------------------------------------------------------


def relative_improvement(loss_new: float, loss_old: float) -> float:
    """(old - new) / max(old, new); positive when the new loss is smaller."""
    if loss_new <= 0 or loss_old <= 0:
        raise ConfigError("relative improvement needs positive losses")
    return (loss_old - loss_new) / max(loss_old, loss_new)


def shared_ranks(values: list[float], tolerance: float = RANK_TIE_TOLERANCE) -> list[float]:
    """Ascending ranks starting at 1; values within `tolerance` share the average rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] - values[order[j]] <= tolerance:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for pos in range(i, j + 1):
            ranks[order[pos]] = mean_rank
        i = j + 1
    return ranks


@dataclass
class Report:
    """Per-task per-plan mean best losses with shared-rank averages."""

    plans: list[str]
    tasks: list[str]
    mean_loss: dict[str, dict[str, float]] = field(default_factory=dict)
    ranks: dict[str, dict[str, float]] = field(default_factory=dict)
    average_rank: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "plans": self.plans,
            "tasks": self.tasks,
            "mean_loss": self.mean_loss,
            "ranks": self.ranks,
            "average_rank": self.average_rank,
        }


def build_report(plans: list[str], losses: dict[str, dict[str, float]]) -> Report:
    """losses: task -> plan -> mean best loss."""
    tasks = list(losses)
    report = Report(plans=plans, tasks=tasks, mean_loss=losses)
    for task in tasks:
        row = [losses[task][p] for p in plans]
        report.ranks[task] = dict(zip(plans, shared_ranks(row)))
    for plan in plans:
        report.average_rank[plan] = float(
            np.mean([report.ranks[task][plan] for task in tasks])
        )
    return report


def compare_plans(
    tasks: list[tuple[str, Objective]],
    *,
    evals: int,
    seeds: list[int],
    plans: list[str] | None = None,
) -> Report:
    """Run every enumerated plan on every task and seed; rank by mean best loss."""
    if not tasks or not seeds:
        raise ConfigError("need at least one task and one seed")
    losses: dict[str, dict[str, float]] = {}
    plan_names: list[str] | None = None
    for task_name, factory in tasks:
        objective = factory() if callable(factory) else factory
        specs = enumerate_plans(objective)
        if plans is not None:
            specs = [s for s in specs if s.shape in plans]
        names = [s.shape for s in specs]
        if plan_names is None:
            plan_names = names
        elif names != plan_names:
            raise ConfigError(
                f"task {task_name!r} supports plans {names}, expected {plan_names}"
            )
        losses[task_name] = {}
        for spec in specs:
            per_seed = []
            for seed in seeds:
                fresh = factory() if callable(factory) else factory
                root = build_plan(spec, fresh, seed=seed)
                per_seed.append(run(root, evals=evals).best_loss)
            losses[task_name][spec.shape] = float(np.mean(per_seed))
    return build_report(plan_names, losses)


def _report_table(report: Report) -> str:
    lines = ["task" + "".join(f"\t{p}" for p in report.plans)]
    for task in report.tasks:
        lines.append(task + "".join(f"\t{report.mean_loss[task][p]:.6g}" for p in report.plans))
    lines.append("avg_rank" + "".join(f"\t{report.average_rank[p]:.3f}" for p in report.plans))
    return "\n".join(lines)


def cmd_compare_plans(args: argparse.Namespace) -> int:
    if args.suite:
        tasks: list[tuple[str, Any]] = [(n, f) for n, f in _suite_factories(args.suite)]
    elif args.benchmark:
        tasks = [(name, _benchmark_factory(name)) for name in args.benchmark]
    else:
        raise ConfigError("compare-plans needs --suite or --benchmark")
    seeds = list(range(args.seeds))
    partial: dict[str, Any] = {}
    try:
        report = compare_plans(tasks, evals=args.budget_evals, seeds=seeds)
    except (RunError, PlanError) as exc:
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump({"error": str(exc), "partial": partial}, fh)
        print(f"compare-plans failed: {exc}", file=sys.stderr)
        return 3
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    print(_report_table(report))
    return 0


def _benchmark_factory(name: str):
    builtin_objective(name)  # validate early
    return lambda: builtin_objective(name)


def _suite_factories(name: str):
    if name != "synthetic6":
        raise ConfigError(f"unknown suite {name!r} (known: synthetic6)")
    return [(task_name, _benchmark_factory(task_name))
            for task_name, _ in synthetic_suite()]


# -- meta commands -----------------------------------------------------------------


def cmd_meta_ingest(args: argparse.Namespace) -> int:
    from .history import read_history

    records = [r for r in read_history(args.history) if r.status == "ok"]
    if args.dataset:
        features = meta_mod.extract_dataset_features(load_dataset(args.dataset))
    elif args.features:
        features = np.asarray(json.loads(args.features), dtype=float)
    else:
        raise ConfigError("ingest needs --dataset or --features")
    if args.split_by:
        groups: dict[str, list] = {}
        for rec in records:
            groups.setdefault(str(rec.config[args.split_by]), []).append(rec)
        for arm in sorted(groups):
            task = meta_mod.MetaTask(
                task_id=f"{args.task_id}__{arm}",
                dataset_features=features,
                records=[(r.config, r.loss) for r in groups[arm]],
                arm=arm,
                space_name=args.space,
            )
            meta_mod.save_meta_task(args.store, task)
        print(f"ingested {len(groups)} arm entries for task {args.task_id}")
        return 0
    task = meta_mod.MetaTask(
        task_id=args.task_id,
        dataset_features=features,
        records=[(r.config, r.loss) for r in records],
        arm=args.arm,
        space_name=args.space,
    )
    meta_mod.save_meta_task(args.store, task)
    print(f"ingested task {args.task_id} ({len(task.records)} ok records)")
    return 0


def cmd_meta_list(args: argparse.Namespace) -> int:
    tasks = meta_mod.load_meta_store(args.store)
    for task in tasks:
        arm = f" arm={task.arm}" if task.arm else ""
        print(f"{task.task_id}: {len(task.records)} records{arm}")
    print(f"{len(tasks)} tasks")
    return 0


def cmd_meta_train_ranker(args: argparse.Namespace) -> int:
    store = meta_mod.load_meta_store(args.store)
    arms = sorted({t.arm for t in store if t.arm is not None})
    if len(arms) < 2:
        raise ConfigError("fewer than 2 arms across the store; cannot build triples")
    by_task: dict[str, set] = {}
    for task in store:
        if task.arm is not None:
            by_task.setdefault(task.task_id, set()).add(task.arm)
    for task_id, task_arms in by_task.items():
        if len(task_arms) < 2:
            warnings.warn(f"task {task_id!r} has a single arm; it contributes no triples")
    triples = meta_mod.build_rank_triples(store, arms)
    if not triples:
        raise ConfigError("no usable better/worse pairs in the store")
    model = meta_mod.train_ranknet(
        triples,
        meta_mod.RankNetConfig(lr=args.lr, epochs=args.epochs),
        rng=np.random.default_rng(args.seed),
    )
    payload = {"arms": arms, "feature_width": len(store[0].dataset_features),
               "model": model.to_dict()}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    print(f"trained ranker on {len(triples)} triples over arms {arms}; wrote {args.out}")
    return 0


# -- argument parsing -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volcano",
        description="Decomposition-based black-box optimization over conditional spaces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="optimize one objective under one plan")
    p_run.add_argument("--config", help="run-config JSON document (overrides other flags)")
    p_run.add_argument("--benchmark")
    p_run.add_argument("--dataset")
    p_run.add_argument("--metric", choices=["balanced_accuracy", "mse"])
    p_run.add_argument("--external-cmd", dest="external_cmd")
    p_run.add_argument("--space", help="space file for --external-cmd")
    p_run.add_argument("--plan", default="CA",
                       choices=["J", "C", "A", "AC", "CA", "CA-progressive"])
    p_run.add_argument("--budget-secs", type=float, dest="budget_secs")
    p_run.add_argument("--budget-evals", type=int, dest="budget_evals")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--meta-store", dest="meta_store")
    p_run.add_argument("--meta-mode", dest="meta_mode",
                       choices=["rgpe_joint", "ranknet_conditioning"])
    p_run.add_argument("--meta-k", dest="meta_k", type=int, default=5)
    p_run.add_argument("--ensemble-size", dest="ensemble_size", type=int)
    p_run.add_argument("--ensemble-n-top", dest="ensemble_n_top", type=int,
                       default=DEFAULT_TOP_PER_ALGORITHM)
    p_run.add_argument("--out", default="history.jsonl")

    p_cmp = sub.add_parser("compare-plans", help="rank the five plans over a task set")
    p_cmp.add_argument("--suite", help="bundled task suite name (synthetic6)")
    p_cmp.add_argument("--benchmark", action="append", help="repeatable benchmark name")
    p_cmp.add_argument("--budget-evals", dest="budget_evals", type=int, required=True)
    p_cmp.add_argument("--seeds", type=int, default=1, help="seeds 0..N-1")
    p_cmp.add_argument("--out")

    p_meta = sub.add_parser("meta", help="prior-task store tooling")
    meta_sub = p_meta.add_subparsers(dest="meta_command", required=True)

    p_ing = meta_sub.add_parser("ingest", help="convert a run history into a store entry")
    p_ing.add_argument("--history", required=True)
    p_ing.add_argument("--store", required=True)
    p_ing.add_argument("--task-id", dest="task_id", required=True)
    p_ing.add_argument("--dataset")
    p_ing.add_argument("--features", help="JSON list of dataset meta-features")
    p_ing.add_argument("--arm")
    p_ing.add_argument("--split-by", dest="split_by",
                       help="variable whose values split the history into per-arm entries")
    p_ing.add_argument("--space")

    p_list = meta_sub.add_parser("list", help="list store entries")
    p_list.add_argument("--store", required=True)

    p_train = meta_sub.add_parser("train-ranker", help="train the arm ranker from a store")
    p_train.add_argument("--store", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--epochs", type=int, default=500)
    p_train.add_argument("--lr", type=float, default=0.05)
    p_train.add_argument("--seed", type=int, default=0)

    return parser


def _run_config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        conflicting = [args.benchmark, args.dataset, args.external_cmd,
                       args.budget_secs, args.budget_evals]
        if any(v is not None for v in conflicting):
            raise ConfigError("--config cannot be combined with objective/budget flags")
        return RunConfig.from_file(args.config)
    cfg = RunConfig(
        benchmark=args.benchmark,
        dataset=args.dataset,
        metric=args.metric,
        external_command=args.external_cmd,
        external_space=args.space,
        plan=args.plan,
        budget_evals=args.budget_evals,
        budget_seconds=args.budget_secs,
        seed=args.seed,
        meta_store=args.meta_store,
        meta_mode=args.meta_mode,
        meta_k=args.meta_k,
        ensemble_size=args.ensemble_size,
        ensemble_n_top=args.ensemble_n_top,
        out=args.out,
    )
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return cmd_run(_run_config_from_args(args))
        if args.command == "compare-plans":
            return cmd_compare_plans(args)
        if args.command == "meta":
            if args.meta_command == "ingest":
                return cmd_meta_ingest(args)
            if args.meta_command == "list":
                return cmd_meta_list(args)
            return cmd_meta_train_ranker(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, SpaceError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RunError, PlanError, ObjectiveError, meta_mod.MetaError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
