"""Desk-scale learners (k-NN, CART-style tree, regularized linear) and the staged pipeline.

Everything here is deterministic given its inputs; no learner consumes
randomness. Classifiers expose class-probability predictions so ensembles can
average them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, design_matrix


class EvaluationFailed(RuntimeError):
    """An objective evaluation could not produce a finite loss."""


# -- k nearest neighbors ----------------------------------------------------


class KNearest:
    def __init__(self, k: int, weighting: str = "uniform", p: int = 2, task: str = "classification",
                 n_classes: int = 0):
        self.k = int(k)
        self.weighting = weighting
        self.p = int(p)
        self.task = task
        self.n_classes = n_classes

    def fit(self, X: np.ndarray, y: np.ndarray) -> "KNearest":
        self._X = X
        self._y = y
        return self

    def _weights_and_neighbors(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.p == 1:
            dist = np.abs(X[:, None, :] - self._X[None, :, :]).sum(axis=2)
        else:
            dist = np.sqrt(((X[:, None, :] - self._X[None, :, :]) ** 2).sum(axis=2))
        k = min(self.k, self._X.shape[0])
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        picked = np.take_along_axis(dist, order, axis=1)
        if self.weighting == "distance":
            w = 1.0 / (picked + 1e-12)
        else:
            w = np.ones_like(picked)
        return w, order

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        w, order = self._weights_and_neighbors(X)
        votes = np.zeros((X.shape[0], self.n_classes))
        neighbor_classes = self._y[order]
        for c in range(self.n_classes):
            votes[:, c] = np.where(neighbor_classes == c, w, 0.0).sum(axis=1)
        return votes / votes.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.task == "classification":
            return np.argmax(self.predict_proba(X), axis=1)
        w, order = self._weights_and_neighbors(X)
        return (self._y[order] * w).sum(axis=1) / w.sum(axis=1)


# -- CART-style decision tree ------------------------------------------------


@dataclass
class _Node:
    feature: int = -1
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None
    value: np.ndarray | float | None = None  # class distribution or mean at leaves


class DecisionTree:
    """Binary tree on numeric features; gini for classification, variance for regression."""

    def __init__(self, max_depth: int, min_split: int = 2, min_leaf: int = 1,
                 task: str = "classification", n_classes: int = 0):
        self.max_depth = int(max_depth)
        self.min_split = int(min_split)
        self.min_leaf = int(min_leaf)
        self.task = task
        self.n_classes = n_classes

    def fit(self, X: np.ndarray, y: np.ndarray) -> "DecisionTree":
        self._root = self._build(X, y, depth=0)
        return self

    def _leaf(self, y: np.ndarray) -> _Node:
        if self.task == "classification":
            counts = np.bincount(y.astype(int), minlength=self.n_classes).astype(float)
            return _Node(value=counts / counts.sum())
        return _Node(value=float(y.mean()))

    def _impurity_gain(self, col: np.ndarray, y: np.ndarray) -> tuple[float, float] | None:
        order = np.argsort(col, kind="stable")
        cs, ys = col[order], y[order]
        n = len(ys)
        distinct = np.flatnonzero(np.diff(cs) > 0) + 1  # split positions between values
        if distinct.size == 0:
            return None
        if self.task == "classification":
            onehot = np.zeros((n, self.n_classes))
            onehot[np.arange(n), ys.astype(int)] = 1.0
            left_counts = np.cumsum(onehot, axis=0)[:-1]
            total = left_counts[-1] + onehot[-1]
            right_counts = total[None, :] - left_counts
            nl = np.arange(1, n)[:, None]
            nr = n - nl
            gini_l = 1.0 - ((left_counts / nl) ** 2).sum(axis=1)
            gini_r = 1.0 - ((right_counts / nr) ** 2).sum(axis=1)
            score = (nl[:, 0] * gini_l + nr[:, 0] * gini_r) / n
        else:
            csum = np.cumsum(ys)[:-1]
            csum2 = np.cumsum(ys**2)[:-1]
            nl = np.arange(1, n)
            nr = n - nl
            tot, tot2 = ys.sum(), (ys**2).sum()
            var_l = csum2 / nl - (csum / nl) ** 2
            var_r = (tot2 - csum2) / nr - ((tot - csum) / nr) ** 2
            score = (nl * var_l + nr * var_r) / n
        valid = np.zeros(n - 1, dtype=bool)
        valid[distinct - 1] = True
        sizes_ok = (np.arange(1, n) >= self.min_leaf) & ((n - np.arange(1, n)) >= self.min_leaf)
        valid &= sizes_ok
        if not valid.any():
            return None
        score = np.where(valid, score, np.inf)
        best = int(np.argmin(score))
        threshold = 0.5 * (cs[best] + cs[best + 1])
        return float(score[best]), threshold

    def _build(self, X: np.ndarray, y: np.ndarray, depth: int) -> _Node:
        n = len(y)
        pure = len(np.unique(y)) == 1
        if depth >= self.max_depth or n < self.min_split or pure:
            return self._leaf(y)
        best = None
        for j in range(X.shape[1]):
            found = self._impurity_gain(X[:, j], y)
            if found is None:
                continue
            score, threshold = found
            if best is None or score < best[0] - 1e-15:
                best = (score, j, threshold)
        if best is None:
            return self._leaf(y)
        _, j, threshold = best
        mask = X[:, j] <= threshold
        node = _Node(feature=j, threshold=threshold)
        node.left = self._build(X[mask], y[mask], depth + 1)
        node.right = self._build(X[~mask], y[~mask], depth + 1)
        return node

    def _walk(self, x: np.ndarray) -> _Node:
        node = self._root
        while node.value is None:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return np.vstack([self._walk(x).value for x in X])

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.task == "classification":
            return np.argmax(self.predict_proba(X), axis=1)
        return np.array([self._walk(x).value for x in X])


# -- regularized linear models ------------------------------------------------


class LinearModel:
    """Softmax logistic regression (classification) or ridge regression (regression).

    The logistic path runs full-batch gradient descent on standardized
    features; ridge uses its closed form. reg_strength is the L2 penalty.
    """

    def __init__(self, reg_strength: float, task: str = "classification", n_classes: int = 0,
                 iters: int = 300, lr: float = 0.5):
        self.lam = float(reg_strength)
        self.task = task
        self.n_classes = n_classes
        self.iters = iters
        self.lr = lr

    def _standardize(self, X: np.ndarray, fit: bool) -> np.ndarray:
        if fit:
            self._mu = X.mean(axis=0)
            sd = X.std(axis=0)
            self._sd = np.where(sd < 1e-12, 1.0, sd)
        return (X - self._mu) / self._sd

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LinearModel":
        Z = self._standardize(X, fit=True)
        n, d = Z.shape
        if self.task == "regression":
            ym = y.mean()
            A = Z.T @ Z + self.lam * np.eye(d)
            self._w = np.linalg.solve(A, Z.T @ (y - ym))
            self._b = float(ym)
            return self
        self._classes_seen = np.unique(y.astype(int))
        W = np.zeros((d, self.n_classes))
        b = np.zeros(self.n_classes)
        onehot = np.zeros((n, self.n_classes))
        onehot[np.arange(n), y.astype(int)] = 1.0
        for _ in range(self.iters):
            logits = Z @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            grad_logits = (p - onehot) / n
            gW = Z.T @ grad_logits + (self.lam / n) * W
            gb = grad_logits.sum(axis=0)
            W -= self.lr * gW
            b -= self.lr * gb
        self._w, self._b = W, b
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        Z = self._standardize(X, fit=False)
        logits = Z @ self._w + self._b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.task == "classification":
            return np.argmax(self.predict_proba(X), axis=1)
        Z = self._standardize(X, fit=False)
        return Z @ self._w + self._b


# -- staged pipeline ----------------------------------------------------------


def _make_learner(config: dict, task: str, n_classes: int):
    algo = config["algo"]
    if algo == "knn":
        return KNearest(config["knn.k"], config["knn.weighting"], config["knn.p"],
                        task=task, n_classes=n_classes)
    if algo == "tree":
        return DecisionTree(config["tree.max_depth"], config["tree.min_split"],
                            config["tree.min_leaf"], task=task, n_classes=n_classes)
    if algo == "linear":
        return LinearModel(config["linear.reg_strength"], task=task, n_classes=n_classes)
    raise EvaluationFailed(f"unknown algorithm {algo!r}")


def _fit_scaler(kind: str, X: np.ndarray):
    if kind == "standardize":
        mu, sd = X.mean(axis=0), X.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        return lambda A: (A - mu) / sd
    if kind == "minmax":
        lo, hi = X.min(axis=0), X.max(axis=0)
        span = np.where(hi - lo < 1e-12, 1.0, hi - lo)
        return lambda A: (A - lo) / span
    return lambda A: A


def _select_features(config: dict, X: np.ndarray) -> np.ndarray:
    if config["selector"] != "variance_top_p":
        return np.arange(X.shape[1])
    keep = math.ceil(config["selector.p"] * X.shape[1])
    variances = X.var(axis=0)
    order = np.argsort(-variances, kind="stable")[:keep]
    return np.sort(order)


def fit_pipeline(config: dict, train: Dataset, fidelity: float, shuffle: np.ndarray):
    """Train scaler -> selector -> learner on the leading `fidelity` fraction of `shuffle`.

    Returns (transform, learner) where transform maps a raw design matrix to
    the learner's input.
    """
    n_use = math.ceil(fidelity * train.n_rows)
    idx = shuffle[:n_use]
    X = design_matrix(train)[idx]
    y = train.labels[idx]
    if X.shape[1] == 0 or X.shape[0] == 0:
        raise EvaluationFailed("degenerate training data (no rows or features)")
    scale = _fit_scaler(config["scaler"], X)
    Xs = scale(X)
    cols = _select_features(config, Xs)
    if cols.size == 0:
        raise EvaluationFailed("feature selection left zero features")
    n_classes = train.n_classes if train.task_kind == "classification" else 0
    learner = _make_learner(config, train.task_kind, n_classes).fit(Xs[:, cols], y)
    return (lambda A: scale(A)[:, cols]), learner


def pipeline_predictions(config: dict, train: Dataset, other: Dataset,
                         fidelity: float, shuffle: np.ndarray) -> np.ndarray:
    """Probabilities (classification) or values (regression) on `other`."""
    transform, learner = fit_pipeline(config, train, fidelity, shuffle)
    X = transform(design_matrix(other))
    if train.task_kind == "classification":
        return learner.predict_proba(X)
    return learner.predict(X)
