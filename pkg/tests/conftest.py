"""Shared fixtures and random-structure generators for the test suite."""

from __future__ import annotations

import os

import numpy as np
import pytest

from volcano.space import SearchSpace, VariableSpec

ASSETS = os.path.join(os.path.dirname(__file__), "..", "src", "volcano", "assets")


def asset_path(name: str) -> str:
    return os.path.join(ASSETS, name)


def random_space(rng: np.random.Generator, max_vars: int = 6) -> SearchSpace:
    """A valid random space mixing kinds, with some conditional variables."""
    n = int(rng.integers(1, max_vars + 1))
    variables = []
    cat_parents = []
    for i in range(n):
        name = f"x{i}"
        kind = ("real", "int", "cat")[int(rng.integers(3))]
        parent = None
        parent_value = None
        if cat_parents and rng.random() < 0.4:
            parent = cat_parents[int(rng.integers(len(cat_parents)))]
            parent_value = parent.choices[int(rng.integers(len(parent.choices)))]
            parent = parent.name
        if kind == "real":
            lo = float(rng.uniform(-10, 5))
            hi = lo + float(rng.uniform(0.5, 10))
            log = bool(rng.random() < 0.25 and lo > 0)
            default = float(rng.uniform(lo, hi))
            variables.append(VariableSpec(name, "real", lo=lo, hi=hi, default=default,
                                          log=log, parent=parent, parent_value=parent_value))
        elif kind == "int":
            lo = int(rng.integers(-5, 5))
            hi = lo + int(rng.integers(0, 10))
            default = int(rng.integers(lo, hi + 1))
            variables.append(VariableSpec(name, "int", lo=lo, hi=hi, default=default,
                                          parent=parent, parent_value=parent_value))
        else:
            k = int(rng.integers(2, 5))
            choices = tuple(f"c{j}" for j in range(k))
            spec = VariableSpec(name, "cat", choices=choices, default=choices[0],
                                parent=parent, parent_value=parent_value)
            variables.append(spec)
            if parent is None:
                cat_parents.append(spec)
    return SearchSpace(name="random", variables=tuple(variables))


def random_partial(rng: np.random.Generator, space: SearchSpace) -> dict:
    """A random consistent partial assignment of `space`."""
    config = space.sample(rng, 1)[0]
    keep = {}
    for name, value in config.items():
        var = space[name]
        if var.conditional:
            continue  # decide parents first
        if rng.random() < 0.5:
            keep[name] = value
    for name, value in config.items():
        var = space[name]
        if var.conditional and var.parent in keep \
                and keep[var.parent] == var.parent_value and rng.random() < 0.5:
            keep[name] = value
    return keep


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
