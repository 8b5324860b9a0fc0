"""Cross-task transfer: ranking-weighted surrogate ensembles and a pairwise arm ranker.

Prior tasks are (meta-features, evaluation history) pairs. Joint blocks reuse
them through a weighted mixture of per-task GPs; conditioning blocks restrict
their arms with scores from a pairwise-trained MLP.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .blocks import Block, BlockError, ConditioningBlock, JointBlock
from .data import Dataset
from .history import HistoryRecord, read_history, write_history
from .objective import Observation
from .surrogate import GPModel, Prediction, fit_gp

RGPE_SAMPLES = 100
RANKNET_HIDDEN = 32
MIN_TARGET_POINTS = 3


class MetaError(ValueError):
    """Invalid prior-task store or transfer configuration."""


# -- meta features ------------------------------------------------------------


def extract_dataset_features(ds: Dataset) -> np.ndarray:
    """5-vector: log10 rows, log10 columns, class count, class imbalance, categorical share."""
    if ds.task_kind == "classification":
        counts = np.bincount(ds.labels, minlength=ds.n_classes)
        counts = counts[counts > 0]
        n_classes = float(len(counts))
        imbalance = float(counts.max() / counts.min())
    else:
        n_classes, imbalance = 0.0, 1.0
    cat_fraction = float(np.mean([k == "categorical" for k in ds.feature_kinds]))
    return np.array([
        math.log10(ds.n_rows),
        math.log10(ds.n_features),
        n_classes,
        imbalance,
        cat_fraction,
    ])


def arm_onehot(vocabulary: Sequence[str]) -> dict[str, np.ndarray]:
    eye = np.eye(len(vocabulary))
    return {arm: eye[i] for i, arm in enumerate(vocabulary)}


# -- prior-task store -----------------------------------------------------------


@dataclass
class MetaTask:
    """One prior task: identity, meta-features, optional arm label, history."""

    task_id: str
    dataset_features: np.ndarray
    records: list[tuple[dict[str, Any], float]]  # (config, loss), ok evaluations only
    arm: str | None = None
    space_name: str | None = None


def save_meta_task(store_dir: str, task: MetaTask) -> str:
    entry = os.path.join(store_dir, task.task_id)
    os.makedirs(entry, exist_ok=True)
    meta = {
        "task_id": task.task_id,
        "dataset_features": [float(x) for x in task.dataset_features],
        "arm": task.arm,
        "space": task.space_name,
    }
    with open(os.path.join(entry, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    records = [
        HistoryRecord(
            iter=i, block_path=("store",), config=cfg, loss=loss, reward=-loss,
            cost_s=0.0, fidelity=1.0, status="ok",
        )
        for i, (cfg, loss) in enumerate(task.records)
    ]
    write_history(os.path.join(entry, "history.jsonl"), records)
    return entry


def load_meta_store(store_dir: str) -> list[MetaTask]:
    if not os.path.isdir(store_dir):
        raise MetaError(f"prior-task store {store_dir!r} is not a directory")
    tasks = []
    for entry in sorted(os.listdir(store_dir)):
        entry_dir = os.path.join(store_dir, entry)
        meta_path = os.path.join(entry_dir, "meta.json")
        history_path = os.path.join(entry_dir, "history.jsonl")
        if not os.path.isdir(entry_dir):
            continue
        if not (os.path.exists(meta_path) and os.path.exists(history_path)):
            raise MetaError(f"store entry {entry!r} needs meta.json and history.jsonl")
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        records = [
            (rec.config, rec.loss)
            for rec in read_history(history_path)
            if rec.status == "ok"
        ]
        tasks.append(MetaTask(
            task_id=meta["task_id"],
            dataset_features=np.asarray(meta["dataset_features"], dtype=float),
            records=records,
            arm=meta.get("arm"),
            space_name=meta.get("space"),
        ))
    widths = {t.dataset_features.shape[0] for t in tasks}
    if len(widths) > 1:
        raise MetaError("store tasks disagree on meta-feature width")
    return tasks


# -- ranking loss and surrogate weights ----------------------------------------


def misranked_pairs(predictions: np.ndarray, targets: np.ndarray) -> int:
    """Ordered pairs (j, k) where the predicted and true orderings disagree."""
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(targets, dtype=float)
    disagree = (p[:, None] < p[None, :]) ^ (y[:, None] < y[None, :])
    return int(disagree.sum())


def ranking_loss(model: GPModel, target_history: Sequence[tuple[np.ndarray, float]]) -> int:
    """Misranked-pair count of the model's posterior means on the target history."""
    if len(target_history) < 2:
        raise MetaError("ranking loss needs at least 2 target points")
    X = np.array([x for x, _ in target_history], dtype=float)
    y = np.array([t for _, t in target_history], dtype=float)
    means, _ = model.predict_batch(X)
    return misranked_pairs(means, y)


def rgpe_weights(
    base_models: Sequence[GPModel],
    target_X: np.ndarray,
    target_y: np.ndarray,
    s_samples: int = RGPE_SAMPLES,
    rng: np.random.Generator | None = None,
    noise_floor: float = 0.0,
) -> np.ndarray:
    """Probability that each candidate surrogate misranks the target least.

    Candidates are the base models plus the target's own GP (scored through
    leave-one-out means). Estimated by posterior-sampling Monte Carlo with
    ties broken uniformly at random.
    """
    target_X = np.atleast_2d(np.asarray(target_X, dtype=float))
    target_y = np.asarray(target_y, dtype=float).ravel()
    n_t = target_y.shape[0]
    if n_t < MIN_TARGET_POINTS:
        raise MetaError(f"need at least {MIN_TARGET_POINTS} target points, got {n_t}")
    if s_samples < 1:
        raise MetaError("need at least one sampling round")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_models = len(base_models) + 1
    if not base_models:
        out = np.zeros(1)
        out[0] = 1.0
        return out

    chols, means = [], []
    for model in base_models:
        mu, cov = model.predict_joint(target_X)
        cov = cov + 1e-10 * np.eye(n_t)
        chols.append(np.linalg.cholesky(cov))
        means.append(mu)
    target_model = fit_gp(target_X, target_y, noise_floor=noise_floor)
    loo_mu, loo_var = target_model.loo_posterior()
    loo_sd = np.sqrt(np.maximum(loo_var, 0.0))

    counts = np.zeros(n_models)
    for _ in range(s_samples):
        losses = np.empty(n_models)
        for i in range(len(base_models)):
            sample = means[i] + chols[i] @ rng.standard_normal(n_t)
            losses[i] = misranked_pairs(sample, target_y)
        target_sample = loo_mu + loo_sd * rng.standard_normal(n_t)
        losses[-1] = misranked_pairs(target_sample, target_y)
        winners = np.flatnonzero(losses == losses.min())
        counts[winners[int(rng.integers(len(winners)))]] += 1
    return counts / s_samples


@dataclass
class RgpeEnsemble:
    """Weighted mixture of per-task surrogates; the target model is the last entry."""

    base_models: list[GPModel]
    target_model: GPModel
    weights: np.ndarray

    def __post_init__(self):
        if len(self.weights) != len(self.base_models) + 1:
            raise MetaError("need one weight per base model plus the target")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise MetaError("weights must form a probability vector")

    def _models(self) -> list[GPModel]:
        return [*self.base_models, self.target_model]

    def predict_batch(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mean = np.zeros(X.shape[0])
        var = np.zeros(X.shape[0])
        for w, model in zip(self.weights, self._models()):
            if w == 0.0:
                continue
            m, v = model.predict_batch(X)
            mean += w * m
            var += w * v
        return mean, var

    def predict(self, x: np.ndarray) -> Prediction:
        means, variances = self.predict_batch(np.atleast_2d(x))
        return Prediction(mean=float(means[0]), variance=float(variances[0]))


def rgpe_predict(ensemble: RgpeEnsemble, x: np.ndarray) -> Prediction:
    return ensemble.predict(x)


# -- pairwise arm ranker ----------------------------------------------------------


@dataclass
class RankTriple:
    """Dataset features with a better/worse arm pair observed on that dataset."""

    dataset_features: np.ndarray
    better_arm_features: np.ndarray
    worse_arm_features: np.ndarray

    def __post_init__(self):
        if np.array_equal(self.better_arm_features, self.worse_arm_features):
            raise MetaError("better and worse arms must differ")


@dataclass
class RankNetConfig:
    lr: float = 0.05
    epochs: int = 500
    margin_hi: float = 0.9
    margin_lo: float = 0.1


@dataclass
class RankNetModel:
    """One-hidden-layer tanh MLP scoring (dataset, arm) feature pairs."""

    w1: np.ndarray  # (input, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float

    @property
    def input_width(self) -> int:
        return self.w1.shape[0]

    def score_batch(self, Z: np.ndarray) -> np.ndarray:
        H = np.tanh(Z @ self.w1 + self.b1)
        return H @ self.w2 + self.b2

    def score(self, dataset_features: np.ndarray, arm_features: np.ndarray) -> float:
        z = np.concatenate([dataset_features, arm_features])
        return float(self.score_batch(z[None, :])[0])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def with_flat(self, theta: np.ndarray) -> "RankNetModel":
        i, h = self.w1.shape
        w1 = theta[: i * h].reshape(i, h)
        b1 = theta[i * h : i * h + h]
        w2 = theta[i * h + h : i * h + 2 * h]
        b2 = float(theta[-1])
        return RankNetModel(w1=w1, b1=b1, w2=w2, b2=b2)

    def to_dict(self) -> dict[str, Any]:
        return {
            "w1": self.w1.tolist(), "b1": self.b1.tolist(),
            "w2": self.w2.tolist(), "b2": self.b2,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "RankNetModel":
        return cls(
            w1=np.asarray(payload["w1"], dtype=float),
            b1=np.asarray(payload["b1"], dtype=float),
            w2=np.asarray(payload["w2"], dtype=float),
            b2=float(payload["b2"]),
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _triple_matrices(triples: Sequence[RankTriple]) -> tuple[np.ndarray, np.ndarray]:
    U = np.array([np.concatenate([t.dataset_features, t.better_arm_features]) for t in triples])
    V = np.array([np.concatenate([t.dataset_features, t.worse_arm_features]) for t in triples])
    return U, V


def ranknet_loss_and_grad(
    model: RankNetModel, U: np.ndarray, V: np.ndarray, config: RankNetConfig
) -> tuple[float, np.ndarray]:
    """Mean pairwise hinge loss on sigmoid score gaps, with its analytic gradient."""

    def forward(Z):
        A = Z @ model.w1 + model.b1
        H = np.tanh(A)
        return H, H @ model.w2 + model.b2

    H_u, r_u = forward(U)
    H_v, r_v = forward(V)
    diff = r_u - r_v
    sig = _sigmoid(diff)
    hinge_hi = np.maximum(0.0, config.margin_hi - sig)
    hinge_lo = np.maximum(0.0, (1.0 - sig) - config.margin_lo)
    loss = float(np.mean(hinge_hi + hinge_lo))

    n = U.shape[0]
    dsig = sig * (1.0 - sig)
    # both hinge terms move loss by -sigma'(diff) when active
    ddiff = (-(hinge_hi > 0).astype(float) - (hinge_lo > 0).astype(float)) * dsig / n

    def backward(Z, H, coeff):
        dw2 = H.T @ coeff
        db2 = float(coeff.sum())
        dH = coeff[:, None] * model.w2[None, :]
        dA = dH * (1.0 - H**2)
        dw1 = Z.T @ dA
        db1 = dA.sum(axis=0)
        return dw1, db1, dw2, db2

    gu = backward(U, H_u, ddiff)
    gv = backward(V, H_v, -ddiff)
    grad = np.concatenate([
        (gu[0] + gv[0]).ravel(),
        gu[1] + gv[1],
        gu[2] + gv[2],
        [gu[3] + gv[3]],
    ])
    return loss, grad


def train_ranknet(
    triples: Sequence[RankTriple],
    config: RankNetConfig | None = None,
    rng: np.random.Generator | None = None,
    hidden: int = RANKNET_HIDDEN,
) -> RankNetModel:
    """Full-batch gradient descent on the pairwise hinge objective."""
    if not triples:
        raise MetaError("need at least one training triple")
    config = config or RankNetConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    U, V = _triple_matrices(triples)
    width = U.shape[1]
    model = RankNetModel(
        w1=rng.uniform(-0.1, 0.1, size=(width, hidden)),
        b1=rng.uniform(-0.1, 0.1, size=hidden),
        w2=rng.uniform(-0.1, 0.1, size=hidden),
        b2=float(rng.uniform(-0.1, 0.1)),
    )
    theta = model.flat()
    for epoch in range(config.epochs):
        current = model.with_flat(theta)
        loss, grad = ranknet_loss_and_grad(current, U, V, config)
        if not math.isfinite(loss):
            raise MetaError(f"non-finite training loss at epoch {epoch}")
        theta = theta - config.lr * grad
    return model.with_flat(theta)


def select_arms(
    model: RankNetModel,
    dataset_features: np.ndarray,
    arms: Sequence[tuple[str, np.ndarray]],
    k: int,
) -> list[str]:
    """Top-k arm labels by MLP score, ties resolved by declaration order."""
    if k < 1:
        raise MetaError("k must be >= 1")
    if k >= len(arms):
        return [label for label, _ in arms]
    scores = np.array([model.score(dataset_features, feats) for _, feats in arms])
    order = sorted(range(len(arms)), key=lambda i: (-scores[i], i))
    return [arms[i][0] for i in order[:k]]


def build_rank_triples(
    store: Sequence[MetaTask], vocabulary: Sequence[str]
) -> list[RankTriple]:
    """One triple per ordered (better, worse) arm pair within each prior task."""
    onehot = arm_onehot(vocabulary)
    by_task: dict[str, list[MetaTask]] = {}
    for task in store:
        if task.arm is None:
            continue
        if task.arm not in onehot:
            raise MetaError(f"store arm {task.arm!r} not in vocabulary {list(vocabulary)}")
        by_task.setdefault(task.task_id, []).append(task)
    triples = []
    for task_id in sorted(by_task):
        entries = by_task[task_id]
        bests = []
        for entry in entries:
            losses = [loss for _, loss in entry.records]
            if losses:
                bests.append((entry.arm, min(losses), entry.dataset_features))
        for arm_a, loss_a, feats in bests:
            for arm_b, loss_b, _ in bests:
                if arm_a != arm_b and loss_a < loss_b:
                    triples.append(RankTriple(
                        dataset_features=np.asarray(feats, dtype=float),
                        better_arm_features=onehot[arm_a],
                        worse_arm_features=onehot[arm_b],
                    ))
    return triples


# -- attaching transfer to blocks ---------------------------------------------------


def attach_meta(
    block: Block,
    store: Sequence[MetaTask],
    mode: str,
    k: int = 5,
    s_samples: int = RGPE_SAMPLES,
) -> None:
    """Wire a prior-task store into a block; an empty store is a no-op."""
    if not store:
        return
    if mode == "rgpe_joint":
        _attach_rgpe(block, store, s_samples)
    elif mode == "ranknet_conditioning":
        _attach_ranknet(block, store, k)
    else:
        raise MetaError(f"unknown meta mode {mode!r}")


def _attach_rgpe(block: Block, store: Sequence[MetaTask], s_samples: int) -> None:
    if not isinstance(block, JointBlock):
        raise MetaError("rgpe_joint requires a joint block")
    tasks = [t for t in store if t.arm is None and t.records]
    if not tasks:
        return
    space = block.free_space
    noise_floor = block.objective.noise_sigma**2
    base_models = []
    for task in tasks:
        try:
            X = np.array([space.encode(cfg) for cfg, _ in task.records])
        except Exception as exc:
            raise MetaError(
                f"store task {task.task_id!r} does not match the block's search space: {exc}"
            ) from None
        y = np.array([loss for _, loss in task.records])
        base_models.append(fit_gp(X, y, noise_floor=noise_floor))

    plain_fit = block._fit_surrogate

    def meta_fit(X: np.ndarray, y: np.ndarray):
        target = plain_fit(X, y)
        if len(y) < MIN_TARGET_POINTS:
            return target
        weights = rgpe_weights(
            base_models, X, y, s_samples=s_samples, rng=block.rng, noise_floor=noise_floor
        )
        return RgpeEnsemble(base_models=base_models, target_model=target, weights=weights)

    block._fit_surrogate = meta_fit


def _attach_ranknet(block: Block, store: Sequence[MetaTask], k: int) -> None:
    if not isinstance(block, ConditioningBlock):
        raise MetaError("ranknet_conditioning requires a conditioning block")
    if block.pull_count > 0:
        raise MetaError("arm pre-selection must happen before the block is played")
    if block.objective.dataset is None:
        raise MetaError("ranknet_conditioning needs a dataset-backed objective")
    vocabulary = list(block.values)
    triples = build_rank_triples(store, vocabulary)
    if not triples:
        return
    model = train_ranknet(triples, rng=np.random.default_rng(block.seedseq.entropy or 0))
    features = extract_dataset_features(block.objective.dataset)
    onehot = arm_onehot(vocabulary)
    selected = set(select_arms(model, features, [(v, onehot[v]) for v in vocabulary], k))
    keep = [i for i, v in enumerate(block.values) if v in selected]
    block.values = [block.values[i] for i in keep]
    block.children = [block.children[i] for i in keep]
    block.active = [block.active[i] for i in keep]
