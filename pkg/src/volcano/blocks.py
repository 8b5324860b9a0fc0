"""Composable optimizer blocks: joint BO leaves, bandit conditioning, alternating groups.

A block owns one sub-problem: a free subspace plus a fixed assignment split
into an immutable part (from decomposition) and mutable context groups
(injected by an alternating parent through set_var). Every evaluation is
checked against the shared run budget first, so evaluation counts are exact
under count budgets.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .learners import EvaluationFailed
from .objective import EvaluationTimeout, Objective, Observation
from .space import SearchSpace
from .surrogate import fit_gp, suggest

PLAYS_PER_ROUND = 5     # arm pulls per conditioning round
EU_SMOOTHING = 3        # growth-rate smoothing window
EUI_WINDOW = 8          # sliding window of per-pull improvements
N_INITIAL_CONFIGS = 3   # queued before the surrogate takes over


class BlockError(ValueError):
    """Invalid block construction or directive."""


class EmptyHistoryError(RuntimeError):
    """No successful observation is available yet."""


class BudgetExhausted(RuntimeError):
    """Raised before starting an evaluation that would exceed the budget."""


@dataclass
class BoundsEstimate:
    """Reward bounds [lower, upper] reachable within `horizon` more budget units."""

    lower: float
    upper: float
    horizon: float


@dataclass
class EuiEstimate:
    """Mean recent per-pull reward improvement (>= 0, or +inf with no history)."""

    value: float


@dataclass
class RunState:
    """Shared per-tree run bookkeeping: budget, global trace, eval counter."""

    budget_evals: int | None = None
    budget_seconds: float | None = None
    evals: int = 0
    trace: list[tuple[Observation, tuple[str, ...]]] = field(default_factory=list)
    clock_start: float = field(default_factory=time.monotonic)

    @property
    def budget_mode(self) -> str:
        return "seconds" if self.budget_seconds is not None else "evals"

    def check(self) -> None:
        if self.budget_evals is not None and self.evals >= self.budget_evals:
            raise BudgetExhausted(f"evaluation budget of {self.budget_evals} used")
        if self.budget_seconds is not None:
            if time.monotonic() - self.clock_start >= self.budget_seconds:
                raise BudgetExhausted(f"time budget of {self.budget_seconds}s used")

    def record(self, obs: Observation, path: tuple[str, ...]) -> None:
        obs.index = len(self.trace)
        self.evals += 1
        self.trace.append((obs, path))

    def remaining_units(self) -> float | None:
        if self.budget_evals is not None:
            return max(self.budget_evals - self.evals, 0)
        if self.budget_seconds is not None:
            return max(self.budget_seconds - (time.monotonic() - self.clock_start), 0.0)
        return None


def _ordered_subset(space: SearchSpace, config: dict[str, Any], names) -> dict[str, Any]:
    wanted = set(names)
    return {v.name: config[v.name] for v in space.variables
            if v.name in wanted and v.name in config}


class Block:
    """Shared machinery: evaluation, pull bookkeeping, EU/EUI, context handling."""

    kind = "abstract"

    def __init__(
        self,
        objective: Objective,
        *,
        fixed_base: dict[str, Any] | None = None,
        context_groups: Sequence[tuple[str, tuple[str, ...]]] = (),
        context_values: Sequence[dict[str, Any]] | None = None,
        state: RunState | None = None,
        seedseq: np.random.SeedSequence | None = None,
        path: tuple[str, ...] = (),
        plays_per_round: int = PLAYS_PER_ROUND,
        smoothing: int = EU_SMOOTHING,
        eui_window: int = EUI_WINDOW,
    ):
        self.objective = objective
        self.fixed_base = dict(fixed_base or {})
        self.context_groups = [(name, tuple(vars_)) for name, vars_ in context_groups]
        if context_values is None:
            context_values = [self._group_defaults(vars_) for _, vars_ in self.context_groups]
        self.context_values = [dict(v) for v in context_values]
        self.state = state if state is not None else RunState()
        self.seedseq = seedseq if seedseq is not None else np.random.SeedSequence(0)
        self.rng = np.random.default_rng(self.seedseq)
        self.path = tuple(path) or (self.kind,)
        self.L = plays_per_round
        self.smoothing = smoothing
        self.eui_window = eui_window
        self.ready = False
        self.pull_count = 0
        self.best_curve: list[float] = []
        self.improvements: list[float] = []
        self._eui_epoch_start = 0
        self._local: list[Observation] = []
        base = {**self.fixed_base, **self.merged_context()}
        self.subproblem = objective.space.substitute(base)
        self.free_space = self.subproblem.space

    # -- context -----------------------------------------------------------

    def _group_defaults(self, group_vars: tuple[str, ...]) -> dict[str, Any]:
        full = self.objective.space.default_config(self.fixed_base)
        return _ordered_subset(self.objective.space, full, group_vars)

    def merged_context(self) -> dict[str, Any]:
        merged: dict[str, Any] = {}
        for values in self.context_values:
            merged.update(values)
        return merged

    def set_var(self, vars: dict[str, Any]) -> None:
        """Replace one context group's assignment; identical values are a no-op."""
        keys = set(vars)
        target = None
        for i, (_, group) in enumerate(self.context_groups):
            if keys <= set(group):
                target = i
                break
        if target is None:
            raise BlockError(
                f"set_var variables {sorted(keys)} do not fit any fixed-context group"
            )
        space = self.objective.space
        for name, value in vars.items():
            if not space[name].contains(value):
                raise BlockError(f"set_var value {value!r} out of domain for {name!r}")
        if vars == self.context_values[target]:
            return
        self.context_values[target] = dict(vars)
        self._on_context_change()
        for child in self.children_list():
            child.set_var(vars)

    def _on_context_change(self) -> None:
        # Improvements achieved under the old context describe a different
        # slice; EUI restarts from here (sentinel until the next pull).
        self._eui_epoch_start = self.pull_count

    # -- evaluation --------------------------------------------------------

    def _full_config(self, free_assignment: dict[str, Any]) -> dict[str, Any]:
        combined = {**self.fixed_base, **self.merged_context(), **free_assignment}
        ordered = {
            v.name: combined[v.name]
            for v in self.objective.space.variables
            if v.name in combined
        }
        self.objective.space.validate_config(ordered)
        return ordered

    def _evaluate(self, free_assignment: dict[str, Any]) -> Observation:
        self.state.check()
        merged = self._full_config(free_assignment)
        seed = int(self.rng.integers(0, 2**31 - 1))
        t0 = time.monotonic()
        try:
            loss = self.objective.evaluate(merged, 1.0, seed)
            status: str = "ok"
        except EvaluationTimeout:
            loss, status = None, "timeout"
        except EvaluationFailed:
            loss, status = None, "failed"
        elapsed = time.monotonic() - t0
        cost = self.objective.cost_model(merged) if self.objective.cost_model else elapsed
        obs = Observation(
            config=merged, loss=loss, cost=float(cost), fidelity=1.0,
            status=status, wall_time=time.time(),
        )
        self.state.record(obs, self.path)
        self._local.append(obs)
        return obs

    # -- structure ---------------------------------------------------------

    def children_list(self) -> list["Block"]:
        return []

    def observations(self) -> Iterator[Observation]:
        yield from self._local
        for child in self.children_list():
            yield from child.observations()

    def best_observation(self) -> Observation | None:
        best = None
        for obs in self.observations():
            if not obs.ok:
                continue
            if best is None or obs.reward > best.reward or (
                obs.reward == best.reward and obs.index < best.index
            ):
                best = obs
        return best

    def get_current_best(self) -> tuple[dict[str, Any], float]:
        obs = self.best_observation()
        if obs is None:
            raise EmptyHistoryError(f"block {'/'.join(self.path)} has no ok observation")
        return obs.config, obs.reward

    # -- bandit statistics ---------------------------------------------------

    def _record_pull(self) -> None:
        self.pull_count += 1
        obs = self.best_observation()
        current = obs.reward if obs is not None else -math.inf
        if self.best_curve:
            previous = self.best_curve[-1]
            if math.isinf(previous) and not math.isinf(current):
                step = math.inf
            elif math.isinf(previous) and math.isinf(current):
                step = 0.0
            else:
                step = max(0.0, current - previous)
        else:
            step = 0.0  # a first pull has no reference point
        self.best_curve.append(current)
        self.improvements.append(step)

    def _mean_pull_cost(self) -> float:
        if self.pull_count == 0:
            return math.inf
        if self.state.budget_mode == "seconds":
            total = sum(o.cost for o in self.observations())
            return max(total, 1e-9) / self.pull_count
        return max(sum(1 for _ in self.observations()), 1) / self.pull_count

    def get_eu(self, horizon: float) -> BoundsEstimate:
        """Reward bounds after `horizon` more budget units, by growth-rate extrapolation."""
        n = self.pull_count
        lower = self.best_curve[-1] if self.best_curve else -math.inf
        ceiling = self.objective.reward_ceiling
        if n <= 1:
            upper = ceiling
        elif not math.isfinite(lower):
            upper = lower  # every pull failed so far
        else:
            window = min(self.smoothing, n - 1)
            previous = self.best_curve[n - 1 - window]
            omega = math.inf if math.isinf(previous) else (lower - previous) / window
            extra_pulls = math.floor(horizon / self._mean_pull_cost())
            if math.isinf(omega) and extra_pulls > 0:
                upper = ceiling
            else:
                upper = min(lower + omega * extra_pulls, ceiling)
        upper = max(upper, lower)  # noise can push observed rewards past the ceiling
        return BoundsEstimate(lower=lower, upper=upper, horizon=horizon)

    def get_eui(self) -> EuiEstimate:
        usable = self.improvements[self._eui_epoch_start:]
        if len(usable) < N_INITIAL_CONFIGS:
            # Still within the initial design of the current context: no
            # usable improvement signal yet, so force exploration.
            return EuiEstimate(value=math.inf)
        window = usable[-self.eui_window:]
        if any(math.isinf(step) for step in window):
            return EuiEstimate(value=math.inf)
        return EuiEstimate(value=float(np.mean(window)))

    # -- interface ----------------------------------------------------------

    def ensure_ready(self) -> None:
        self.ready = True

    def do_next(self) -> None:
        raise NotImplementedError


class JointBlock(Block):
    """Leaf: Bayesian optimization over its whole free subspace."""

    kind = "joint"

    def __init__(self, objective, **kwargs):
        super().__init__(objective, **kwargs)
        self._free: list[dict[str, Any]] = []
        self._stale_from = 0
        self._model = None
        if self.free_space.variables:
            defaults = self.free_space.default_config()
            self._queue = [defaults] + self.free_space.sample(self.rng, N_INITIAL_CONFIGS - 1)
        else:
            self._queue = [{}]

    def _on_context_change(self) -> None:
        # Observations under the old partner values describe a different slice;
        # keep them for reporting but restart the surrogate, re-anchored at the
        # best free assignments seen so far (re-evaluated under the new context).
        super()._on_context_change()
        ranked = sorted(
            (i for i, obs in enumerate(self._local) if obs.ok),
            key=lambda i: (self._local[i].loss, i),
        )
        self._stale_from = len(self._local)
        self._model = None
        if not self.free_space.variables:
            return
        evaluated = [obs.config for obs in self._local]
        for i in ranked:
            free = self._free[i]
            if self._full_config(free) in evaluated:
                continue  # merging with the new context reproduces a known point
            self._queue = [dict(free)]
            return

    def _fresh_ok(self) -> list[tuple[dict[str, Any], float]]:
        return [
            (self._free[i], self._local[i].loss)
            for i in range(self._stale_from, len(self._local))
            if self._local[i].ok
        ]

    def _fit_surrogate(self, X: np.ndarray, y: np.ndarray):
        return fit_gp(X, y, noise_floor=self.objective.noise_sigma**2)

    def do_next(self) -> None:
        self.ensure_ready()
        free = None
        if not self.free_space.variables:
            free = {}
        elif self._queue:
            free = self._queue.pop(0)
        if free is None:
            fresh = self._fresh_ok()
            if fresh and self._model is not None:
                free = suggest(self.free_space, self._model, fresh, self.rng)
            else:
                free = self.free_space.sample(self.rng, 1)[0]
        self._evaluate(free)
        self._free.append(free)
        fresh = self._fresh_ok()
        if fresh and self.free_space.variables:
            X = np.array([self.free_space.encode(cfg) for cfg, _ in fresh])
            y = np.array([loss for _, loss in fresh])
            self._model = self._fit_surrogate(X, y)
        self._record_pull()


class ConditioningBlock(Block):
    """Bandit over the values of one categorical variable, one child block per value."""

    kind = "conditioning"

    def __init__(self, objective, var: str, *, child_builder: Callable | None = None, **kwargs):
        super().__init__(objective, **kwargs)
        if var not in self.free_space:
            raise BlockError(f"conditioning variable {var!r} is not free")
        spec = self.free_space[var]
        if spec.kind != "cat":
            raise BlockError(f"conditioning variable {var!r} must be categorical")
        self.var = var
        self.values: list[str] = list(spec.choices)
        self._child_builder = child_builder or _default_conditioning_child
        self.children: list[Block] = []
        self.active: list[bool] = []
        for value in self.values:
            self._append_child(value)

    def _append_child(self, value: str) -> None:
        seedseq = self.seedseq.spawn(1)[0]
        child = self._child_builder(self, value, seedseq)
        self.children.append(child)
        self.active.append(True)

    def children_list(self) -> list[Block]:
        return self.children

    def active_children(self) -> list[Block]:
        return [c for c, a in zip(self.children, self.active) if a]

    def _eu_horizon(self) -> float:
        remaining = self.state.remaining_units()
        if remaining is not None:
            return remaining
        return float(self.L * len(self.active_children()))

    def do_next(self) -> None:
        """One round: L pulls of every active arm, then dominance elimination."""
        self.ensure_ready()
        for _ in range(self.L):
            for idx, child in enumerate(self.children):
                if self.active[idx]:
                    child.do_next()
        horizon = self._eu_horizon()
        eligible = [i for i in range(len(self.children)) if self.active[i]]
        bounds = [self.children[i].get_eu(horizon) for i in eligible]
        flags = eliminate_dominated(bounds)
        for flag, idx in zip(flags, eligible):
            if not flag and self.children[idx].pull_count >= self.L:
                self.active[idx] = False
        self._record_pull()

    def extend_arms(self, new_values: Sequence[str], objective: Objective) -> None:
        extend_arms(self, new_values, objective)


class AlternatingBlock(Block):
    """Two-group decomposition optimized alternately, arbitrated by recent improvement."""

    kind = "alternating"

    def __init__(
        self,
        objective,
        groups: Sequence[tuple[str, tuple[str, ...]]],
        *,
        child_builder: Callable | None = None,
        **kwargs,
    ):
        super().__init__(objective, **kwargs)
        if len(groups) != 2:
            raise BlockError("alternating needs exactly two variable groups")
        (name_a, vars_a), (name_b, vars_b) = groups
        vars_a, vars_b = tuple(vars_a), tuple(vars_b)
        free_names = set(self.free_space.names)
        if set(vars_a) & set(vars_b):
            raise BlockError("alternating groups overlap")
        if (set(vars_a) | set(vars_b)) != free_names:
            raise BlockError(
                "alternating groups must cover the free variables exactly "
                f"(free: {sorted(free_names)})"
            )
        for group in (vars_a, vars_b):
            for name in group:
                spec = self.free_space[name]
                if spec.conditional and spec.parent not in group:
                    raise BlockError(
                        f"group splits conditional variable {name!r} from its parent"
                    )
        self.groups = [(name_a, vars_a), (name_b, vars_b)]
        self.smoothing = max(self.smoothing, 2 * self.L)
        builder = child_builder or _default_alternating_child
        self.children: list[Block] = []
        for side in (0, 1):
            seedseq = self.seedseq.spawn(1)[0]
            self.children.append(builder(self, side, seedseq))

    def children_list(self) -> list[Block]:
        return self.children

    def _pending_injection(self, receiver_side: int) -> dict[str, Any] | None:
        donor = self.children[1 - receiver_side]
        donor_group = self.groups[1 - receiver_side][1]
        obs = donor.best_observation()
        if obs is None:
            return None
        return _ordered_subset(self.objective.space, obs.config, donor_group)

    def _inject(self, receiver_side: int) -> None:
        assignment = self._pending_injection(receiver_side)
        if assignment is not None:
            self.children[receiver_side].set_var(assignment)

    def _side_eui(self, side: int) -> float:
        """EUI of a side, with the no-usable-history sentinel.

        A side that has not been played since the partner's best moved holds
        improvement history for a different slice, so it reports +inf just
        like a side with no pulls at all.
        """
        child = self.children[side]
        pending = self._pending_injection(side)
        if pending is not None:
            partner_group = self.groups[1 - side][1]
            for name, group in child.context_groups:
                if tuple(group) == tuple(partner_group):
                    idx = child.context_groups.index((name, group))
                    if child.context_values[idx] != pending:
                        return math.inf
                    break
        return child.get_eui().value

    def ensure_ready(self) -> None:
        """Warm-up: L alternating rounds, first group leading, bests cross-injected.

        Each warm-up round counts as one of this block's own pulls, so the
        reward curve covers the warm-up phase.
        """
        if self.ready:
            return
        self.ready = True
        b1, b2 = self.children
        for _ in range(self.L):
            b1.do_next()
            self._inject(receiver_side=1)
            b2.do_next()
            self._inject(receiver_side=0)
            self._record_pull()

    def do_next(self) -> None:
        self.ensure_ready()
        d1 = self._side_eui(0)
        d2 = self._side_eui(1)
        side = 0 if d1 >= d2 else 1
        self._inject(receiver_side=side)
        self.children[side].do_next()
        self._record_pull()


# -- default child builders ---------------------------------------------------


def _default_conditioning_child(parent: ConditioningBlock, value: str, seedseq) -> Block:
    return JointBlock(
        parent.objective,
        fixed_base={**parent.fixed_base, parent.var: value},
        context_groups=parent.context_groups,
        context_values=parent.context_values,
        state=parent.state,
        seedseq=seedseq,
        path=parent.path + (f"{parent.var}={value}",),
        plays_per_round=parent.L,
        smoothing=parent.smoothing,
        eui_window=parent.eui_window,
    )


def _default_alternating_child(parent: AlternatingBlock, side: int, seedseq) -> Block:
    own_name, own_vars = parent.groups[side]
    partner_name, partner_vars = parent.groups[1 - side]
    child = JointBlock(
        parent.objective,
        fixed_base=parent.fixed_base,
        context_groups=list(parent.context_groups) + [(partner_name, partner_vars)],
        state=parent.state,
        seedseq=seedseq,
        path=parent.path + (own_name,),
        plays_per_round=parent.L,
        smoothing=parent.smoothing,
        eui_window=parent.eui_window,
    )
    return child


# -- module-level operations ----------------------------------------------------


def eliminate_dominated(
    bounds: Sequence[BoundsEstimate], active: Sequence[bool] | None = None
) -> list[bool]:
    """Deactivate i iff some active j has l_j > u_i; the best lower bound survives."""
    if not bounds:
        raise BlockError("need at least one child")
    flags = list(active) if active is not None else [True] * len(bounds)
    protected = None
    for i, b in enumerate(bounds):
        if flags[i] and (protected is None or b.lower > bounds[protected].lower):
            protected = i
    out = list(flags)
    for i, b in enumerate(bounds):
        if not flags[i] or i == protected:
            continue
        dominated = any(
            flags[j] and j != i and bounds[j].lower > b.upper for j in range(len(bounds))
        )
        if dominated:
            out[i] = False
    return out


def extend_arms(block: ConditioningBlock, new_values: Sequence[str], objective: Objective) -> None:
    """Append fresh arms for new conditioning values; eliminated arms stay eliminated."""
    if not isinstance(block, ConditioningBlock):
        raise BlockError("extend_arms needs a conditioning block")
    new_values = list(new_values)
    if not new_values:
        return
    if len(set(new_values)) != len(new_values) or set(new_values) & set(block.values):
        raise BlockError("duplicate conditioning value")
    _check_extended_space(block, new_values, objective)
    block.objective = objective
    for value in new_values:
        block.values.append(value)
        block._append_child(value)


def _check_extended_space(block, new_values, objective) -> None:
    old_space, new_space = block.objective.space, objective.space
    new_by_name = {v.name: v for v in new_space.variables}
    for v in old_space.variables:
        other = new_by_name.get(v.name)
        if other is None:
            raise BlockError(f"extended space dropped variable {v.name!r}")
        if v.name == block.var:
            if not set(v.choices) <= set(other.choices) or not set(new_values) <= set(other.choices):
                raise BlockError(f"extended space must add {new_values} to {v.name!r}")
        elif other != v:
            raise BlockError(f"extended space changed variable {v.name!r}")
    for name, v in new_by_name.items():
        if name not in old_space and not (v.parent == block.var and v.parent_value in new_values):
            raise BlockError(
                f"new variable {name!r} must be conditional on a new {block.var!r} value"
            )


def init_block(
    objective: Objective,
    fixed_vars: dict[str, Any] | None = None,
    kind: str = "joint",
    directive: dict[str, Any] | None = None,
    *,
    seed: int = 0,
    state: RunState | None = None,
    plays_per_round: int = PLAYS_PER_ROUND,
) -> Block:
    """Create a block over substitute(space, fixed_vars) and run its warm-up."""
    directive = directive or {}
    common = dict(
        fixed_base=fixed_vars or {},
        state=state,
        seedseq=np.random.SeedSequence(seed),
        plays_per_round=plays_per_round,
    )
    if kind == "joint":
        block: Block = JointBlock(objective, **common)
    elif kind == "conditioning":
        if "var" not in directive:
            raise BlockError("conditioning directive needs 'var'")
        block = ConditioningBlock(objective, directive["var"], **common)
    elif kind == "alternating":
        if "groups" not in directive:
            raise BlockError("alternating directive needs 'groups'")
        block = AlternatingBlock(objective, directive["groups"], **common)
    else:
        raise BlockError(f"unknown block kind {kind!r}")
    block.ensure_ready()
    return block
