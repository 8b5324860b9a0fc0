"""Typed search spaces with conditional activation, sampling, and vector encoding.

A space is an ordered list of variables (real / integer / categorical). A
variable may be conditional on one categorical parent taking a specific value;
parents must themselves be unconditional, so the condition graph has depth at
most 2. A configuration assigns exactly the active variables.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

NEIGHBOR_SIGMA = 0.2  # Gaussian step, in units of the normalized [0, 1] range
_ENC_TOL = 1e-12


class SpaceError(ValueError):
    """Malformed space definition, or a value outside its domain."""


@dataclass(frozen=True)
class VariableSpec:
    """One tunable variable: domain, default, and optional activation condition."""

    name: str
    kind: str  # "real" | "int" | "cat"
    lo: float | None = None
    hi: float | None = None
    choices: tuple[str, ...] = ()
    default: Any = None
    log: bool = False
    parent: str | None = None
    parent_value: Any = None

    def __post_init__(self):
        if self.kind == "real":
            if self.lo is None or self.hi is None or not (self.lo < self.hi):
                raise SpaceError(f"variable {self.name!r}: empty real domain (need lo < hi)")
            if self.log and self.lo <= 0:
                raise SpaceError(f"variable {self.name!r}: log scale requires lo > 0")
            if self.default is None or not (self.lo <= float(self.default) <= self.hi):
                raise SpaceError(f"variable {self.name!r}: default outside [lo, hi]")
        elif self.kind == "int":
            if self.lo is None or self.hi is None or int(self.lo) > int(self.hi):
                raise SpaceError(f"variable {self.name!r}: empty integer domain (need lo <= hi)")
            if self.log:
                raise SpaceError(f"variable {self.name!r}: log scale unsupported for integers")
            if self.default is None or not (self.lo <= int(self.default) <= self.hi):
                raise SpaceError(f"variable {self.name!r}: default outside [lo, hi]")
        elif self.kind == "cat":
            if not self.choices or len(set(self.choices)) != len(self.choices):
                raise SpaceError(f"variable {self.name!r}: needs >= 1 distinct choices")
            if self.default not in self.choices:
                raise SpaceError(f"variable {self.name!r}: default not among choices")
        else:
            raise SpaceError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if (self.parent is None) != (self.parent_value is None):
            raise SpaceError(f"variable {self.name!r}: condition needs both parent and value")

    @property
    def conditional(self) -> bool:
        return self.parent is not None

    @property
    def width(self) -> int:
        """Number of encoding slots this variable occupies."""
        return len(self.choices) if self.kind == "cat" else 1

    def contains(self, value: Any) -> bool:
        if self.kind == "real":
            return isinstance(value, (int, float)) and not isinstance(value, bool) \
                and self.lo <= float(value) <= self.hi
        if self.kind == "int":
            return isinstance(value, (int, np.integer)) and not isinstance(value, bool) \
                and self.lo <= int(value) <= self.hi
        return value in self.choices

    def unit(self, value: Any) -> float:
        """Map a domain value to [0, 1] (log-transformed first when log-scaled)."""
        if self.kind == "cat":
            raise SpaceError(f"variable {self.name!r}: unit() undefined for categoricals")
        lo, hi = float(self.lo), float(self.hi)
        if self.kind == "int" and hi == lo:
            return 0.5
        if self.log:
            return (math.log(float(value)) - math.log(lo)) / (math.log(hi) - math.log(lo))
        return (float(value) - lo) / (hi - lo)

    def from_unit(self, u: float) -> Any:
        u = min(max(float(u), 0.0), 1.0)
        lo, hi = float(self.lo), float(self.hi)
        if self.log:
            return math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
        value = lo + u * (hi - lo)
        if self.kind == "int":
            return int(min(max(round(value), int(lo)), int(hi)))
        return value


@dataclass(frozen=True)
class SearchSpace:
    """Ordered, validated collection of variables with a depth-<=2 condition graph."""

    name: str
    variables: tuple[VariableSpec, ...]

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SpaceError(f"space {self.name!r}: duplicate variable names")
        by_name = {v.name: v for v in self.variables}
        for v in self.variables:
            if not v.conditional:
                continue
            parent = by_name.get(v.parent)
            if parent is None:
                raise SpaceError(f"variable {v.name!r}: unknown parent {v.parent!r}")
            if parent.kind != "cat":
                raise SpaceError(f"variable {v.name!r}: parent {v.parent!r} must be categorical")
            if parent.conditional:
                raise SpaceError(
                    f"variable {v.name!r}: parent {v.parent!r} is itself conditional "
                    "(condition depth exceeds 2)"
                )
            if v.parent_value not in parent.choices:
                raise SpaceError(
                    f"variable {v.name!r}: parent value {v.parent_value!r} "
                    f"not a choice of {v.parent!r}"
                )
        object.__setattr__(self, "_by_name", by_name)
        offsets, pos = {}, 0
        for v in self.variables:
            offsets[v.name] = pos
            pos += v.width
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_width", pos)

    # -- lookup ----------------------------------------------------------

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> VariableSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise SpaceError(f"space {self.name!r}: unknown variable {name!r}") from None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    @property
    def encoding_width(self) -> int:
        return self._width

    def is_active(self, var: VariableSpec, assignment: dict[str, Any]) -> bool:
        if not var.conditional:
            return True
        return assignment.get(var.parent) == var.parent_value

    def active_names(self, assignment: dict[str, Any]) -> list[str]:
        return [v.name for v in self.variables if self.is_active(v, assignment)]

    def default_config(self, fixed: dict[str, Any] | None = None) -> dict[str, Any]:
        """Full assignment extending `fixed` with defaults, activation resolved."""
        fixed = fixed or {}
        merged = dict(fixed)
        for v in self.variables:
            if v.name not in merged:
                merged[v.name] = v.default
        out = {}
        for v in self.variables:
            if self.is_active(v, merged):
                out[v.name] = fixed.get(v.name, v.default)
        return out

    def validate_config(self, config: dict[str, Any]) -> None:
        """Exactly the active variables assigned, every value in-domain."""
        for name, value in config.items():
            var = self[name]
            if not var.contains(value):
                raise SpaceError(f"variable {name!r}: value {value!r} out of domain")
        active = set(self.active_names(config))
        assigned = set(config)
        if assigned != active:
            missing = active - assigned
            extra = assigned - active
            raise SpaceError(
                f"space {self.name!r}: invalid configuration "
                f"(missing {sorted(missing)}, inactive-but-assigned {sorted(extra)})"
            )

    # -- sampling --------------------------------------------------------

    def sample(self, rng: np.random.Generator, n: int) -> list[dict[str, Any]]:
        """n valid configurations; log-scaled reals uniform in log space."""
        return self.sample_encoded(rng, n)[0]

    def sample_stratified(self, rng: np.random.Generator, n: int) -> list[dict[str, Any]]:
        """n configurations with numeric draws stratified per variable (LHS-style)."""
        if n <= 0:
            return []
        columns: dict[str, np.ndarray] = {}
        for v in self.variables:
            if v.kind == "cat":
                columns[v.name] = rng.integers(0, len(v.choices), size=n)
                continue
            u = (rng.permutation(n) + rng.random(n)) / n
            if v.kind == "int":
                lo, hi = int(v.lo), int(v.hi)
                vals = np.clip(np.floor(lo + u * (hi - lo + 1)), lo, hi).astype(int)
            else:
                vals = np.array([v.from_unit(x) for x in u])
            columns[v.name] = vals
        configs = []
        for i in range(n):
            cfg: dict[str, Any] = {}
            for v in self.variables:
                if v.conditional and cfg.get(v.parent) != v.parent_value:
                    continue
                raw = columns[v.name][i]
                if v.kind == "cat":
                    cfg[v.name] = v.choices[int(raw)]
                elif v.kind == "int":
                    cfg[v.name] = int(raw)
                else:
                    cfg[v.name] = float(raw)
            configs.append(cfg)
        return configs

    def sample_encoded(
        self, rng: np.random.Generator, n: int
    ) -> tuple[list[dict[str, Any]], np.ndarray]:
        """Sample n configurations together with their encoded rows."""
        if n < 0:
            raise SpaceError("sample count must be >= 0")
        if n == 0:
            return [], np.empty((0, self._width))
        columns: dict[str, np.ndarray] = {}
        for v in self.variables:
            if v.kind == "real":
                u = rng.random(n)
                if v.log:
                    vals = np.exp(math.log(v.lo) + u * (math.log(v.hi) - math.log(v.lo)))
                else:
                    vals = v.lo + u * (v.hi - v.lo)
                columns[v.name] = vals
            elif v.kind == "int":
                columns[v.name] = rng.integers(int(v.lo), int(v.hi) + 1, size=n)
            else:
                columns[v.name] = rng.integers(0, len(v.choices), size=n)
        configs: list[dict[str, Any]] = []
        for i in range(n):
            cfg: dict[str, Any] = {}
            for v in self.variables:
                if v.conditional and cfg.get(v.parent) != v.parent_value:
                    continue
                raw = columns[v.name][i]
                if v.kind == "real":
                    cfg[v.name] = float(raw)
                elif v.kind == "int":
                    cfg[v.name] = int(raw)
                else:
                    cfg[v.name] = v.choices[int(raw)]
            configs.append(cfg)
        return configs, self._encode_sampled(columns, configs, n)

    def _encode_sampled(self, columns, configs, n) -> np.ndarray:
        out = np.tile(self._default_encoding(), (n, 1))
        for v in self.variables:
            off = self._offsets[v.name]
            if v.conditional:
                active = np.array([v.name in cfg for cfg in configs])
                if not active.any():
                    continue
            else:
                active = np.ones(n, dtype=bool)
            col = columns[v.name]
            if v.kind == "cat":
                hot = np.zeros((n, len(v.choices)))
                hot[np.arange(n), col.astype(int)] = 1.0
                out[active, off : off + len(v.choices)] = hot[active]
            else:
                units = np.array([v.unit(x) for x in col[active]])
                out[active, off] = units
        return out

    # -- encoding --------------------------------------------------------

    def _default_encoding(self) -> np.ndarray:
        cached = getattr(self, "_default_enc", None)
        if cached is None:
            vec = np.zeros(self._width)
            for v in self.variables:
                off = self._offsets[v.name]
                if v.kind == "cat":
                    vec[off + v.choices.index(v.default)] = 1.0
                else:
                    vec[off] = v.unit(v.default)
            object.__setattr__(self, "_default_enc", vec)
            cached = vec
        return cached

    def encode(self, config: dict[str, Any]) -> np.ndarray:
        """Fixed-width vector: numerics min-max normalized, categoricals one-hot.

        Inactive variables are imputed with their default's encoding, so width
        depends only on the space.
        """
        vec = self._default_encoding().copy()
        for name, value in config.items():
            v = self[name]
            off = self._offsets[name]
            if v.kind == "cat":
                vec[off : off + len(v.choices)] = 0.0
                vec[off + v.choices.index(value)] = 1.0
            else:
                vec[off] = v.unit(value)
        return vec

    # -- local moves -----------------------------------------------------

    def neighbors(
        self, config: dict[str, Any], rng: np.random.Generator, k: int
    ) -> list[dict[str, Any]]:
        """k valid configurations, each one mutation of a single active variable."""
        out = []
        names = list(config)
        for _ in range(k):
            name = names[int(rng.integers(len(names)))]
            var = self[name]
            if var.kind == "cat":
                others = [c for c in var.choices if c != config[name]]
                new = others[int(rng.integers(len(others)))] if others else config[name]
            else:
                new = var.from_unit(var.unit(config[name]) + NEIGHBOR_SIGMA * rng.standard_normal())
            out.append(self._reresolve({**config, name: new}))
        return out

    def _reresolve(self, assignment: dict[str, Any]) -> dict[str, Any]:
        """Re-run activation after a mutation; newly active variables get defaults."""
        cfg = {}
        for v in self.variables:
            if v.conditional and assignment.get(v.parent) != v.parent_value:
                continue
            cfg[v.name] = assignment.get(v.name, v.default)
        return cfg

    # -- substitution ----------------------------------------------------

    def substitute(self, fixed: dict[str, Any]) -> "SubProblem":
        """Fix a subset of variables; the rest (minus deactivated ones) stay free."""
        for name, value in fixed.items():
            var = self[name]
            if not var.contains(value):
                raise SpaceError(f"variable {name!r}: fixed value {value!r} out of domain")
        for name in fixed:
            var = self[name]
            if var.conditional:
                if var.parent not in fixed:
                    raise SpaceError(
                        f"variable {name!r}: cannot fix a conditional variable "
                        f"while its parent {var.parent!r} is free"
                    )
                if fixed[var.parent] != var.parent_value:
                    raise SpaceError(
                        f"variable {name!r}: inactive under {var.parent}={fixed[var.parent]!r}"
                    )
        free = []
        for v in self.variables:
            if v.name in fixed:
                continue
            if v.conditional and v.parent in fixed:
                if fixed[v.parent] == v.parent_value:
                    free.append(replace(v, parent=None, parent_value=None))
                # else: deactivated, dropped entirely
            else:
                free.append(v)
        sub_space = SearchSpace(name=f"{self.name}|sub", variables=tuple(free))
        ordered_fixed = {v.name: fixed[v.name] for v in self.variables if v.name in fixed}
        return SubProblem(parent=self, space=sub_space, fixed=ordered_fixed)


@dataclass
class SubProblem:
    """A space restricted by a partial assignment; evaluation merges fixed and free."""

    parent: SearchSpace
    space: SearchSpace
    fixed: dict[str, Any]

    def merged(self, free_assignment: dict[str, Any], validate: bool = True) -> dict[str, Any]:
        combined = {**self.fixed, **free_assignment}
        ordered = {v.name: combined[v.name] for v in self.parent.variables if v.name in combined}
        if validate:
            self.parent.validate_config(ordered)
        return ordered


# -- document format -------------------------------------------------------

_KIND_ALIASES = {"real": "real", "int": "int", "cat": "cat"}


def parse_space(text: str) -> SearchSpace:
    """Parse the JSON space-definition document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpaceError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "name" not in doc or "variables" not in doc:
        raise SpaceError("space document needs top-level 'name' and 'variables'")
    variables = []
    for i, entry in enumerate(doc["variables"]):
        where = f"variables[{i}]"
        if not isinstance(entry, dict) or "name" not in entry or "type" not in entry:
            raise SpaceError(f"{where}: each variable needs 'name' and 'type'")
        kind = _KIND_ALIASES.get(entry["type"])
        if kind is None:
            raise SpaceError(f"{where}: unknown type {entry['type']!r}")
        if "default" not in entry:
            raise SpaceError(f"{where} ({entry['name']!r}): missing field 'default'")
        cond = entry.get("condition")
        if cond is not None and (not isinstance(cond, dict) or set(cond) != {"parent", "equals"}):
            raise SpaceError(f"{where} ({entry['name']!r}): condition needs 'parent' and 'equals'")
        kwargs: dict[str, Any] = {
            "name": entry["name"],
            "kind": kind,
            "default": entry["default"],
            "log": bool(entry.get("log", False)),
            "parent": cond["parent"] if cond else None,
            "parent_value": cond["equals"] if cond else None,
        }
        if kind == "cat":
            kwargs["choices"] = tuple(entry.get("choices", ()))
        else:
            if "lo" not in entry or "hi" not in entry:
                raise SpaceError(f"{where} ({entry['name']!r}): missing field 'lo' or 'hi'")
            kwargs["lo"] = entry["lo"]
            kwargs["hi"] = entry["hi"]
            if kind == "int":
                kwargs["default"] = int(entry["default"])
        variables.append(VariableSpec(**kwargs))
    return SearchSpace(name=doc["name"], variables=tuple(variables))


def load_space(path: str) -> SearchSpace:
    with open(path, encoding="utf-8") as fh:
        return parse_space(fh.read())


def space_to_dict(space: SearchSpace) -> dict[str, Any]:
    """Inverse of parse_space, up to field defaults."""
    entries = []
    for v in space.variables:
        e: dict[str, Any] = {"name": v.name, "type": v.kind}
        if v.kind == "cat":
            e["choices"] = list(v.choices)
        else:
            e["lo"], e["hi"] = v.lo, v.hi
        e["default"] = v.default
        if v.log:
            e["log"] = True
        if v.conditional:
            e["condition"] = {"parent": v.parent, "equals": v.parent_value}
        entries.append(e)
    return {"name": space.name, "variables": entries}
