"""Execution plans: five coarse tree shapes, the recursive run loop, progressive search.

A plan is a tree of blocks whose leaves are all joint blocks. Running a plan
repeatedly asks the root to iterate once; the call propagates down to a leaf,
which performs exactly one evaluation (plus warm-up on first touch).
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .blocks import (
    AlternatingBlock,
    Block,
    BlockError,
    BudgetExhausted,
    ConditioningBlock,
    JointBlock,
    RunState,
)
from .history import HistoryRecord
from .objective import Objective
from .space import SearchSpace

PLAN_SHAPES = ("J", "C", "A", "AC", "CA")
PROGRESSIVE_FRACTIONS = (0.3, 0.35, 0.35)


class PlanError(ValueError):
    """Plan specification inconsistent with the objective's space."""


class RunError(RuntimeError):
    """A run finished without a single successful observation."""

    def __init__(self, message: str, failures: list[HistoryRecord] | None = None):
        super().__init__(message)
        self.failures = failures or []


@dataclass
class PlanSpec:
    """Shape plus the labels that anchor it to a space.

    feature_vars / hyper_vars name the alternating partition; cond_var the
    conditioning variable. `custom` holds an explicit tree description.
    """

    shape: str
    cond_var: str | None = None
    feature_vars: tuple[str, ...] = ()
    hyper_vars: tuple[str, ...] = ()
    custom: dict[str, Any] | None = None

    @classmethod
    def from_objective(cls, shape: str, objective: Objective) -> "PlanSpec":
        return cls(
            shape=shape,
            cond_var=objective.algo_var,
            feature_vars=tuple(objective.feature_vars),
            hyper_vars=tuple(objective.hyper_vars),
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"shape": self.shape}
        if self.custom is not None:
            out["custom"] = self.custom
        return out


@dataclass
class RunResult:
    """Outcome of one run: the incumbent plus the full flattened history."""

    best_config: dict[str, Any]
    best_loss: float
    best_reward: float
    history: list[HistoryRecord]
    wall_seconds: float
    evaluations: int


# -- validation ----------------------------------------------------------------


def _validate_labels(spec: PlanSpec, objective: Objective) -> None:
    space = objective.space
    names = set(space.names)
    needs_partition = spec.shape in ("A", "AC", "CA")
    needs_cond = spec.shape in ("C", "AC", "CA")
    if needs_cond:
        if not spec.cond_var:
            raise PlanError(f"plan {spec.shape}: no conditioning variable designated")
        if spec.cond_var not in space:
            raise PlanError(f"plan {spec.shape}: unknown conditioning variable {spec.cond_var!r}")
        if space[spec.cond_var].kind != "cat":
            raise PlanError(f"plan {spec.shape}: conditioning variable must be categorical")
    if needs_partition:
        labeled = set(spec.feature_vars) | set(spec.hyper_vars)
        if spec.cond_var:
            labeled.add(spec.cond_var)
        if set(spec.feature_vars) & set(spec.hyper_vars):
            raise PlanError(f"plan {spec.shape}: partition labels overlap")
        if labeled != names:
            raise PlanError(
                f"plan {spec.shape}: partition labels must cover the space "
                f"(missing {sorted(names - labeled)}, unknown {sorted(labeled - names)})"
            )


# -- construction ----------------------------------------------------------------


def build_plan(spec: PlanSpec, objective: Objective, seed: int = 0,
               plays_per_round: int = 5) -> Block:
    """Construct the block tree for a plan; no evaluations happen here."""
    if spec.shape == "custom":
        if spec.custom is None:
            raise PlanError("custom plan needs a tree description")
        return _build_custom(spec.custom, objective, seed, plays_per_round)
    if spec.shape not in PLAN_SHAPES:
        raise PlanError(f"unknown plan shape {spec.shape!r}")
    _validate_labels(spec, objective)
    state = RunState()
    seedseq = np.random.SeedSequence(seed)
    common = dict(state=state, seedseq=seedseq, plays_per_round=plays_per_round)
    try:
        if spec.shape == "J":
            return JointBlock(objective, path=("joint",), **common)
        if spec.shape == "C":
            return ConditioningBlock(
                objective, spec.cond_var, path=(f"cond({spec.cond_var})",), **common
            )
        if spec.shape == "A":
            groups = _alternating_groups(spec)
            return AlternatingBlock(objective, groups, path=("alt",), **common)
        if spec.shape == "AC":
            return _build_ac(spec, objective, common)
        return _build_ca(spec, objective, common)
    except BlockError as exc:
        raise PlanError(str(exc)) from None


def _alternating_groups(spec: PlanSpec) -> list[tuple[str, tuple[str, ...]]]:
    cash = (spec.cond_var,) + tuple(spec.hyper_vars) if spec.cond_var else tuple(spec.hyper_vars)
    return [("features", tuple(spec.feature_vars)), ("cash", cash)]


def _build_ca(spec: PlanSpec, objective: Objective, common: dict) -> Block:
    feature_set = set(spec.feature_vars)

    def arm_child(parent: ConditioningBlock, value: str, seedseq) -> Block:
        fixed = {**parent.fixed_base, parent.var: value}
        free = objective.space.substitute(fixed).space.names
        arm_hypers = tuple(n for n in free if n not in feature_set)
        return AlternatingBlock(
            parent.objective,
            [("features", tuple(spec.feature_vars)), ("hypers", arm_hypers)],
            fixed_base=fixed,
            context_groups=parent.context_groups,
            context_values=parent.context_values,
            state=parent.state,
            seedseq=seedseq,
            path=parent.path + (f"{parent.var}={value}",),
            plays_per_round=parent.L,
            smoothing=parent.smoothing,
            eui_window=parent.eui_window,
        )

    return ConditioningBlock(
        objective, spec.cond_var, child_builder=arm_child,
        path=(f"cond({spec.cond_var})",), **common,
    )


def _build_ac(spec: PlanSpec, objective: Objective, common: dict) -> Block:
    feature_set = set(spec.feature_vars)

    def side_child(parent: AlternatingBlock, side: int, seedseq) -> Block:
        own_name, own_vars = parent.groups[side]
        partner_name, partner_vars = parent.groups[1 - side]
        kwargs = dict(
            fixed_base=parent.fixed_base,
            context_groups=list(parent.context_groups) + [(partner_name, partner_vars)],
            state=parent.state,
            seedseq=seedseq,
            path=parent.path + (own_name,),
            plays_per_round=parent.L,
            smoothing=parent.smoothing,
            eui_window=parent.eui_window,
        )
        if side == 0:
            return JointBlock(parent.objective, **kwargs)
        return ConditioningBlock(parent.objective, spec.cond_var, **kwargs)

    return AlternatingBlock(
        objective, _alternating_groups(spec), child_builder=side_child,
        path=("alt",), **common,
    )


def _build_custom(tree: dict[str, Any], objective: Objective, seed: int,
                  plays_per_round: int) -> Block:
    _validate_custom(tree)
    state = RunState()
    seedseq = np.random.SeedSequence(seed)
    return _build_custom_node(tree, objective, {}, [], state, seedseq, (), plays_per_round)


def _validate_custom(node: dict[str, Any]) -> None:
    kind = node.get("kind")
    if kind == "joint":
        return
    if kind == "conditioning":
        child = node.get("child")
        if child is None:
            raise PlanError("all leaf blocks must be joint (conditioning block has no child)")
        _validate_custom(child)
        return
    if kind == "alternating":
        for side in ("left", "right"):
            part = node.get(side)
            if part is None or part.get("child") is None:
                raise PlanError(f"all leaf blocks must be joint (alternating {side} missing)")
            _validate_custom(part["child"])
        return
    raise PlanError(f"unknown block kind {kind!r} in custom plan")


def _build_custom_node(node, objective, fixed, context_groups, state, seedseq, path,
                       plays_per_round) -> Block:
    kind = node["kind"]
    common = dict(
        fixed_base=fixed, context_groups=context_groups, state=state,
        seedseq=seedseq, path=path or (kind,), plays_per_round=plays_per_round,
    )
    try:
        if kind == "joint":
            return JointBlock(objective, **common)
        if kind == "conditioning":

            def cond_child(parent, value, child_seed):
                return _build_custom_node(
                    node["child"], parent.objective,
                    {**parent.fixed_base, parent.var: value},
                    parent.context_groups, parent.state, child_seed,
                    parent.path + (f"{parent.var}={value}",), parent.L,
                )

            return ConditioningBlock(objective, node["var"], child_builder=cond_child, **common)

        groups = [
            (node["left"]["name"], tuple(node["left"]["vars"])),
            (node["right"]["name"], tuple(node["right"]["vars"])),
        ]

        def alt_child(parent, side, child_seed):
            part = node["left" if side == 0 else "right"]
            partner_name, partner_vars = parent.groups[1 - side]
            return _build_custom_node(
                part["child"], parent.objective, parent.fixed_base,
                list(parent.context_groups) + [(partner_name, partner_vars)],
                parent.state, child_seed, parent.path + (part["name"],), parent.L,
            )

        return AlternatingBlock(objective, groups, child_builder=alt_child, **common)
    except BlockError as exc:
        raise PlanError(str(exc)) from None


# -- enumeration ----------------------------------------------------------------


def enumerate_plans(objective: Objective) -> list[PlanSpec]:
    """The five coarse shapes, or the degenerate [J, A] pair without an algorithm variable."""
    space = objective.space
    names = set(space.names)
    labeled = set(objective.feature_vars) | set(objective.hyper_vars)
    if objective.algo_var:
        labeled.add(objective.algo_var)
    if not objective.feature_vars and not objective.hyper_vars:
        raise PlanError("objective lacks a feature/hyperparameter labeling")
    if labeled != names:
        raise PlanError(
            f"objective labeling does not cover the space (missing {sorted(names - labeled)})"
        )
    has_algo = objective.algo_var is not None and space[objective.algo_var].kind == "cat"
    if not has_algo:
        warnings.warn("no categorical algorithm variable; only plans J and A apply")
        return [PlanSpec.from_objective(s, objective) for s in ("J", "A")]
    return [PlanSpec.from_objective(s, objective) for s in PLAN_SHAPES]


# -- execution ----------------------------------------------------------------


def _finalize(state: RunState, wall: float) -> RunResult:
    records = [HistoryRecord.from_observation(obs, path) for obs, path in state.trace]
    best = None
    for obs, _ in state.trace:
        if obs.ok and (best is None or obs.reward > best.reward):
            best = obs
    if best is None:
        raise RunError(
            f"no successful observation in {len(records)} evaluations", failures=records
        )
    return RunResult(
        best_config=dict(best.config),
        best_loss=best.loss,
        best_reward=best.reward,
        history=records,
        wall_seconds=wall,
        evaluations=len(records),
    )


def run(root: Block, evals: int | None = None, seconds: float | None = None) -> RunResult:
    """Iterate do_next on the root until the budget is spent.

    Budgets are checked before each evaluation starts, so a count budget is
    exact and an in-flight evaluation may overrun a time budget but is kept.
    """
    if evals is None and seconds is None:
        raise PlanError("a budget (evals or seconds) is required")
    state = root.state
    state.budget_evals = evals
    state.budget_seconds = seconds
    state.clock_start = time.monotonic()
    t0 = time.monotonic()
    try:
        while True:
            state.check()
            root.do_next()
    except BudgetExhausted:
        pass
    return _finalize(state, time.monotonic() - t0)


def run_plan(objective: Objective, spec: PlanSpec, *, seed: int = 0,
             evals: int | None = None, seconds: float | None = None,
             plays_per_round: int = 5) -> RunResult:
    root = build_plan(spec, objective, seed=seed, plays_per_round=plays_per_round)
    return run(root, evals=evals, seconds=seconds)


# -- progressive strategy ----------------------------------------------------------


def run_progressive(
    objective: Objective,
    evals: int,
    stage_fractions: tuple[float, float, float] = PROGRESSIVE_FRACTIONS,
    seed: int = 0,
    spec: PlanSpec | None = None,
) -> RunResult:
    """Top-down pass: screen algorithms at defaults, then features, then hyperparameters."""
    if spec is None:
        spec = PlanSpec.from_objective("CA", objective)
    if spec.shape != "CA":
        raise PlanError("progressive optimization applies to the CA shape")
    _validate_labels(spec, objective)
    if len(stage_fractions) != 3 or any(f <= 0 for f in stage_fractions):
        raise PlanError("stage_fractions must be three positive fractions")
    if abs(sum(stage_fractions) - 1.0) > 1e-9:
        raise PlanError("stage_fractions must sum to 1")
    space = objective.space
    values = list(space[spec.cond_var].choices)
    n1 = math.floor(stage_fractions[0] * evals)
    n2 = math.floor(stage_fractions[1] * evals)
    n3 = evals - n1 - n2
    if n1 < len(values):
        raise PlanError(
            f"stage-1 budget {n1} is smaller than the number of algorithm values {len(values)}"
        )
    state = RunState(budget_evals=evals)
    seedseq = np.random.SeedSequence(seed)
    t0 = time.monotonic()
    feature_set = set(spec.feature_vars)
    try:
        # stage 1: every algorithm at full defaults, round-robin
        screens = []
        for value in values:
            fixed = space.default_config({spec.cond_var: value})
            screens.append(JointBlock(
                objective, fixed_base=fixed, state=state, seedseq=seedseq.spawn(1)[0],
                path=("progressive", "screen", f"{spec.cond_var}={value}"),
            ))
        for i in range(n1):
            screens[i % len(values)].do_next()
        mean_losses = []
        for block in screens:
            losses = [o.loss for o in block.observations() if o.ok]
            mean_losses.append(float(np.mean(losses)) if losses else math.inf)
        if all(math.isinf(m) for m in mean_losses):
            return _finalize(state, time.monotonic() - t0)  # raises RunError
        winner = values[int(np.argmin(mean_losses))]

        # stage 2: features, with the winner's hyperparameters at defaults
        base = space.default_config({spec.cond_var: winner})
        fixed2 = {k: v for k, v in base.items() if k not in feature_set}
        stage2 = JointBlock(
            objective, fixed_base=fixed2, state=state, seedseq=seedseq.spawn(1)[0],
            path=("progressive", "features"),
        )
        for _ in range(n2):
            stage2.do_next()
        best2 = stage2.best_observation()
        source = best2.config if best2 is not None else base
        best_features = {
            v.name: source[v.name] for v in space.variables
            if v.name in feature_set and v.name in source
        }

        # stage 3: the winner's hyperparameters, with the best features fixed
        fixed3 = dict(best_features)
        fixed3[spec.cond_var] = winner
        fixed3 = {v.name: fixed3[v.name] for v in space.variables if v.name in fixed3}
        stage3 = JointBlock(
            objective, fixed_base=fixed3, state=state, seedseq=seedseq.spawn(1)[0],
            path=("progressive", "hypers"),
        )
        for _ in range(n3):
            stage3.do_next()
    except BudgetExhausted:
        pass
    return _finalize(state, time.monotonic() - t0)
