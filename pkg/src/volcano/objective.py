"""Black-box objectives: the built-in ML pipeline, synthetic surfaces, and task metrics.

An objective owns a search space and a deterministic eval function
(config, fidelity, seed) -> loss. Failures raise EvaluationFailed; callers
record them rather than letting NaNs through.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .data import Dataset, split_train_valid_test
from .learners import EvaluationFailed, pipeline_predictions
from .space import SearchSpace, VariableSpec

BRANIN_MINIMUM = 0.39788735772973816


class ObjectiveError(ValueError):
    """Invalid objective construction parameters."""


class EvaluationTimeout(EvaluationFailed):
    """An evaluation exceeded its wall-clock limit."""


# -- metrics -----------------------------------------------------------------


def balanced_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Mean of per-class accuracies over the classes present in `labels`."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    accs = []
    for cls in np.unique(labels):
        mask = labels == cls
        accs.append(float(np.mean(predictions[mask] == cls)))
    return float(np.mean(accs))


def mean_squared_error(predictions: np.ndarray, labels: np.ndarray) -> float:
    residual = np.asarray(predictions, dtype=float) - np.asarray(labels, dtype=float)
    return float(np.mean(residual**2))


def score(metric: str, predictions, labels) -> float:
    """balanced_accuracy or mse over aligned prediction/label arrays."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape[0] != labels.shape[0]:
        raise ObjectiveError("predictions and labels must have equal length")
    if labels.shape[0] == 0:
        raise ObjectiveError("empty inputs")
    if metric == "balanced_accuracy":
        return balanced_accuracy(predictions, labels)
    if metric == "mse":
        return mean_squared_error(predictions, labels)
    raise ObjectiveError(f"unknown metric {metric!r}")


# -- observations ------------------------------------------------------------


@dataclass
class Observation:
    """One objective evaluation. reward = -loss when ok; loss absent otherwise."""

    config: dict[str, Any]
    loss: float | None
    cost: float
    fidelity: float
    status: str  # "ok" | "failed" | "timeout"
    wall_time: float = 0.0
    index: int = -1  # global order within a run trace

    @property
    def reward(self) -> float | None:
        return -self.loss if self.status == "ok" else None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


History = list[Observation]


def best_observation(history: History) -> Observation | None:
    """Max-reward ok observation; ties go to the earliest."""
    best = None
    for obs in history:
        if not obs.ok:
            continue
        if best is None or obs.reward > best.reward:
            best = obs
    return best


# -- the objective type --------------------------------------------------------


@dataclass
class Objective:
    """A minimized black-box function over a search space.

    feature_vars / hyper_vars / algo_var label the decomposition structure
    used by plan construction; loss_lower_bound (None for unbounded) feeds
    the bandit reward ceiling.
    """

    space: SearchSpace
    eval_fn: Callable[[dict[str, Any], float, int], float]
    name: str = "objective"
    cost_model: Callable[[dict[str, Any]], float] | None = None
    noise_sigma: float = 0.0
    loss_lower_bound: float | None = 0.0
    algo_var: str | None = None
    feature_vars: tuple[str, ...] = ()
    hyper_vars: tuple[str, ...] = ()
    dataset: Dataset | None = None

    @property
    def reward_ceiling(self) -> float:
        if self.loss_lower_bound is None:
            return math.inf
        return -self.loss_lower_bound

    def evaluate(self, config: dict[str, Any], fidelity: float = 1.0, seed: int = 0) -> float:
        if not 0 < fidelity <= 1:
            raise ObjectiveError(f"fidelity {fidelity} outside (0, 1]")
        self.space.validate_config(config)
        loss = float(self.eval_fn(config, fidelity, seed))
        if not math.isfinite(loss):
            raise EvaluationFailed(f"non-finite loss {loss!r}")
        return loss


def _stable_eval_rng(config: dict[str, Any], seed: int) -> np.random.Generator:
    """Deterministic per-(config, seed) generator, platform independent."""
    payload = json.dumps([config, seed], sort_keys=True).encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "big"))


# -- built-in pipeline objective -----------------------------------------------


def pipeline_space() -> SearchSpace:
    """Staged pipeline space: scaler, feature selector, learner, and its knobs."""
    v = VariableSpec
    return SearchSpace(
        name="pipeline_small",
        variables=(
            v("scaler", "cat", choices=("none", "standardize", "minmax"), default="none"),
            v("selector", "cat", choices=("none", "variance_top_p"), default="none"),
            v("selector.p", "real", lo=0.1, hi=1.0, default=0.5,
              parent="selector", parent_value="variance_top_p"),
            v("algo", "cat", choices=("knn", "tree", "linear"), default="knn"),
            v("knn.k", "int", lo=1, hi=25, default=5, parent="algo", parent_value="knn"),
            v("knn.weighting", "cat", choices=("uniform", "distance"), default="uniform",
              parent="algo", parent_value="knn"),
            v("knn.p", "int", lo=1, hi=2, default=2, parent="algo", parent_value="knn"),
            v("tree.max_depth", "int", lo=1, hi=12, default=6,
              parent="algo", parent_value="tree"),
            v("tree.min_split", "int", lo=2, hi=20, default=2,
              parent="algo", parent_value="tree"),
            v("tree.min_leaf", "int", lo=1, hi=10, default=1,
              parent="algo", parent_value="tree"),
            v("linear.reg_strength", "real", lo=1e-4, hi=1e2, default=1.0, log=True,
              parent="algo", parent_value="linear"),
        ),
    )


PIPELINE_FEATURE_VARS = ("scaler", "selector", "selector.p")
PIPELINE_HYPER_VARS = (
    "knn.k", "knn.weighting", "knn.p",
    "tree.max_depth", "tree.min_split", "tree.min_leaf",
    "linear.reg_strength",
)


@dataclass
class PipelineObjective(Objective):
    """Pipeline search over a dataset: validation loss of the configured pipeline."""

    train: Dataset = None
    valid: Dataset = None
    test: Dataset = None
    metric: str = "balanced_accuracy"
    fidelity_shuffle: np.ndarray = None

    def _loss_from_predictions(self, predictions: np.ndarray, labels: np.ndarray) -> float:
        if self.metric == "balanced_accuracy":
            hard = np.argmax(predictions, axis=1)
            return 1.0 - balanced_accuracy(hard, labels)
        return mean_squared_error(predictions, labels)

    def valid_predictions(self, config: dict[str, Any], fidelity: float = 1.0) -> np.ndarray:
        return pipeline_predictions(config, self.train, self.valid, fidelity,
                                    self.fidelity_shuffle)

    def test_predictions(self, config: dict[str, Any]) -> np.ndarray:
        """Refit on the whole search portion (train + valid), predict the test split."""
        search = self.train.merge(self.valid)
        shuffle = np.arange(search.n_rows)
        return pipeline_predictions(config, search, self.test, 1.0, shuffle)

    def final_score(self, config: dict[str, Any]) -> float:
        preds = self.test_predictions(config)
        if self.metric == "balanced_accuracy":
            return balanced_accuracy(np.argmax(preds, axis=1), self.test.labels)
        return mean_squared_error(preds, self.test.labels)


def make_pipeline_objective(dataset: Dataset, metric: str, seed: int = 0) -> PipelineObjective:
    """Objective over the built-in pipeline space, scored on a validation split."""
    if metric == "balanced_accuracy" and dataset.task_kind != "classification":
        raise ObjectiveError("balanced_accuracy requires a classification dataset")
    if metric == "mse" and dataset.task_kind != "regression":
        raise ObjectiveError("mse requires a regression dataset")
    if metric not in ("balanced_accuracy", "mse"):
        raise ObjectiveError(f"unknown metric {metric!r}")
    train, valid, test = split_train_valid_test(dataset, seed)
    shuffle = np.random.default_rng(seed).permutation(train.n_rows)

    obj = PipelineObjective(
        space=pipeline_space(),
        eval_fn=None,
        name=f"pipeline[{dataset.name}]",
        loss_lower_bound=0.0,
        algo_var="algo",
        feature_vars=PIPELINE_FEATURE_VARS,
        hyper_vars=PIPELINE_HYPER_VARS,
        dataset=dataset,
        train=train,
        valid=valid,
        test=test,
        metric=metric,
        fidelity_shuffle=shuffle,
    )

    def eval_fn(config: dict[str, Any], fidelity: float, seed_: int) -> float:
        predictions = obj.valid_predictions(config, fidelity)
        return obj._loss_from_predictions(predictions, obj.valid.labels)

    obj.eval_fn = eval_fn
    return obj


# -- synthetic surfaces -----------------------------------------------------


def _noise_term(config: dict[str, Any], seed: int, sigma: float) -> float:
    if sigma == 0:
        return 0.0
    return sigma * float(_stable_eval_rng(config, seed).standard_normal())


def make_synthetic_objective(kind: str, params: dict[str, Any] | None = None) -> Objective:
    """Synthetic test surfaces: conditional_quadratic, branin, separable_quadratic."""
    params = dict(params or {})
    noise = float(params.pop("noise", 0.0))
    if noise < 0:
        raise ObjectiveError("noise sigma must be >= 0")
    if kind == "conditional_quadratic":
        return _conditional_quadratic(params, noise)
    if kind == "branin":
        return _branin(params, noise)
    if kind == "separable_quadratic":
        return _separable_quadratic(params, noise)
    raise ObjectiveError(f"unknown synthetic objective kind {kind!r}")


def _conditional_quadratic(params: dict[str, Any], noise: float) -> Objective:
    arms = list(params.get("arms", ("a1", "a2", "a3")))
    if len(set(arms)) != len(arms):
        raise ObjectiveError("duplicate arm names")
    offsets = [float(b) for b in params["offsets"]]
    optima = [tuple(map(float, uv)) for uv in params["optima"]]
    if not (len(arms) == len(offsets) == len(optima)):
        raise ObjectiveError("arms, offsets, and optima must align")
    lo, hi = params.get("bounds", (-5.0, 5.0))
    name = params.get("name", f"conditional_quadratic_{len(arms)}")
    v = VariableSpec
    space = SearchSpace(
        name=name,
        variables=(
            v("arm", "cat", choices=tuple(arms), default=arms[0]),
            v("u", "real", lo=lo, hi=hi, default=0.0),
            v("v", "real", lo=lo, hi=hi, default=0.0),
        ),
    )
    table = {arm: (b, uv) for arm, b, uv in zip(arms, offsets, optima)}
    lower = min(offsets) if min(offsets) >= 0 else None

    def eval_fn(config, fidelity, seed):
        b, (us, vs) = table[config["arm"]]
        loss = b + (config["u"] - us) ** 2 + (config["v"] - vs) ** 2
        return loss + _noise_term(config, seed, noise)

    return Objective(
        space=space, eval_fn=eval_fn, name=name,
        cost_model=lambda c: 1.0, noise_sigma=noise,
        loss_lower_bound=0.0 if lower is not None else None,
        algo_var="arm", feature_vars=("u",), hyper_vars=("v",),
    )


def _branin(params: dict[str, Any], noise: float) -> Objective:
    v = VariableSpec
    space = SearchSpace(
        name="branin",
        variables=(
            v("x1", "real", lo=-5.0, hi=10.0, default=0.0),
            v("x2", "real", lo=0.0, hi=15.0, default=7.5),
        ),
    )
    a, b, c = 1.0, 5.1 / (4 * math.pi**2), 5 / math.pi
    r, s, t = 6.0, 10.0, 1 / (8 * math.pi)

    def eval_fn(config, fidelity, seed):
        x1, x2 = config["x1"], config["x2"]
        loss = a * (x2 - b * x1**2 + c * x1 - r) ** 2 + s * (1 - t) * math.cos(x1) + s
        return loss + _noise_term(config, seed, noise)

    return Objective(
        space=space, eval_fn=eval_fn, name="branin",
        cost_model=lambda c: 1.0, noise_sigma=noise, loss_lower_bound=0.0,
        feature_vars=("x1",), hyper_vars=("x2",),
    )


def _separable_quadratic(params: dict[str, Any], noise: float) -> Objective:
    left = dict(params.get("left", {"u": 1.5}))
    right = dict(params.get("right", {"v": -2.0}))
    lo, hi = params.get("bounds", (-5.0, 5.0))
    name = params.get("name", "separable_quadratic")
    overlap = set(left) & set(right)
    if overlap:
        raise ObjectiveError(f"variable groups overlap: {sorted(overlap)}")
    v = VariableSpec
    variables = tuple(
        v(n, "real", lo=lo, hi=hi, default=0.0) for n in list(left) + list(right)
    )
    space = SearchSpace(name=name, variables=variables)
    targets = {**left, **right}

    def eval_fn(config, fidelity, seed):
        loss = sum((config[n] - targets[n]) ** 2 for n in targets)
        return loss + _noise_term(config, seed, noise)

    return Objective(
        space=space, eval_fn=eval_fn, name=name,
        cost_model=lambda c: 1.0, noise_sigma=noise, loss_lower_bound=0.0,
        feature_vars=tuple(left), hyper_vars=tuple(right),
    )


# -- benchmark registry ------------------------------------------------------


def _cq(name, offsets, optima, noise=0.0, arms=None):
    arms = arms or tuple(f"a{i + 1}" for i in range(len(offsets)))
    return make_synthetic_objective(
        "conditional_quadratic",
        {"name": name, "arms": arms, "offsets": offsets, "optima": optima, "noise": noise},
    )


BENCHMARKS: dict[str, Callable[[], Objective]] = {
    "conditional_quadratic_3": lambda: _cq(
        "conditional_quadratic_3",
        offsets=(0.0, 0.5, 1.0),
        optima=((1.5, -2.0), (-3.0, 1.0), (2.5, 3.0)),
    ),
    # Defaults (u=v=0) make the offset-0.4 arm look best even though the
    # offset-0 arm holds the global optimum far from the defaults.
    "conditional_quadratic_adversarial": lambda: _cq(
        "conditional_quadratic_adversarial",
        offsets=(0.4, 0.0, 0.8),
        optima=((0.0, 0.0), (3.0, -3.0), (1.0, -1.0)),
    ),
    "separable_quadratic": lambda: make_synthetic_objective(
        "separable_quadratic", {"left": {"u": 1.5}, "right": {"v": -2.0}}
    ),
    "separable_quadratic_4": lambda: make_synthetic_objective(
        "separable_quadratic",
        {"name": "separable_quadratic_4",
         "left": {"u1": 1.5, "u2": -0.5}, "right": {"v1": -2.0, "v2": 3.0}},
    ),
    "branin": lambda: make_synthetic_objective("branin", {}),
}


SUITE6 = (
    ("cq3_spread", lambda: _cq("cq3_spread", (0.0, 0.5, 1.0),
                               ((1.5, -2.0), (-3.0, 1.0), (2.5, 3.0)))),
    ("cq3_clustered", lambda: _cq("cq3_clustered", (0.0, 0.6, 1.2),
                                  ((-2.2, -3.1), (0.5, 2.0), (4.0, -4.0)))),
    ("cq4_mixed", lambda: _cq("cq4_mixed", (0.0, 0.4, 0.8, 1.2),
                              ((2.0, 2.0), (-1.0, 4.0), (-4.0, -1.5), (3.5, -2.5)))),
    ("cq5_wide", lambda: _cq("cq5_wide", (0.0, 0.3, 0.6, 0.9, 1.2),
                             ((1.0, -1.0), (-2.5, 2.5), (4.0, 4.0), (-4.0, -4.0), (0.5, 3.5)))),
    ("cq3_noisy", lambda: _cq("cq3_noisy", (0.0, 0.5, 1.0),
                              ((-1.5, 2.0), (3.0, -1.0), (-2.5, -3.0)), noise=0.02)),
    ("cq4_tight", lambda: _cq("cq4_tight", (0.0, 0.3, 0.6, 0.9),
                              ((0.5, -0.5), (-3.5, 1.5), (2.5, 3.5), (-1.5, -4.0)))),
)


def builtin_objective(name: str) -> Objective:
    factory = BENCHMARKS.get(name) or dict(SUITE6).get(name)
    if factory is None:
        known = sorted(set(BENCHMARKS) | {n for n, _ in SUITE6})
        raise ObjectiveError(f"unknown benchmark {name!r}; known: {', '.join(known)}")
    return factory()


def synthetic_suite() -> list[tuple[str, Objective]]:
    """The bundled six-task suite used by the plan comparison harness."""
    return [(name, factory()) for name, factory in SUITE6]
