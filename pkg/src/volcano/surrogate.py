"""Gaussian-process surrogate with expected-improvement candidate suggestion.

Squared-exponential kernel on the encoded [0,1]/one-hot space; hyperparameters
picked by exact log-marginal-likelihood grid search. Targets are standardized
internally and predictions de-standardized on the way out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.special import ndtr

LENGTHSCALE_GRID = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
SIGNAL_GRID = (0.25, 1.0, 4.0)
MIN_NOISE = 1e-6
MAX_JITTER = 1e-4

N_RANDOM_CANDIDATES = 1000
N_NEIGHBOR_SOURCES = 5
N_NEIGHBORS_EACH = 10


class FitError(RuntimeError):
    """GP fitting failed (non-finite inputs or an unfactorizable Gram matrix)."""


@dataclass
class Prediction:
    mean: float
    variance: float


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    a2 = (A**2).sum(axis=1)[:, None]
    b2 = (B**2).sum(axis=1)[None, :]
    return np.maximum(a2 + b2 - 2.0 * A @ B.T, 0.0)


class GPModel:
    """Fitted GP: cached Cholesky factorization, standardization constants."""

    def __init__(self, X, y_std, lengthscale, signal, noise, chol, alpha, y_mean, y_scale):
        self.X = X
        self.y_std = y_std
        self.lengthscale = lengthscale
        self.signal = signal
        self.noise = noise
        self._chol = chol
        self._alpha = alpha
        self.y_mean = y_mean
        self.y_scale = y_scale

    @property
    def input_width(self) -> int:
        return self.X.shape[1]

    def _kernel_cross(self, Xq: np.ndarray) -> np.ndarray:
        d2 = _sq_dists(Xq, self.X)
        return self.signal * np.exp(-d2 / (2.0 * self.lengthscale**2))

    def predict_batch(self, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """De-standardized posterior means and variances for query rows."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if Xq.shape[1] != self.input_width:
            raise FitError(f"query width {Xq.shape[1]} != training width {self.input_width}")
        K_star = self._kernel_cross(Xq)
        mean_std = K_star @ self._alpha
        V = solve_triangular(self._chol, K_star.T, lower=True)
        var_std = np.maximum(self.signal - (V**2).sum(axis=0), 0.0)
        return mean_std * self.y_scale + self.y_mean, var_std * self.y_scale**2

    def predict(self, x: np.ndarray) -> Prediction:
        means, variances = self.predict_batch(np.atleast_2d(x))
        return Prediction(mean=float(means[0]), variance=float(variances[0]))

    def predict_joint(self, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean vector and full covariance matrix (de-standardized)."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        K_star = self._kernel_cross(Xq)
        mean_std = K_star @ self._alpha
        V = solve_triangular(self._chol, K_star.T, lower=True)
        prior = self.signal * np.exp(-_sq_dists(Xq, Xq) / (2.0 * self.lengthscale**2))
        cov_std = prior - V.T @ V
        return mean_std * self.y_scale + self.y_mean, cov_std * self.y_scale**2

    def loo_posterior(self) -> tuple[np.ndarray, np.ndarray]:
        """Leave-one-out means and variances at the training points (closed form)."""
        n = self.X.shape[0]
        K_inv = cho_solve((self._chol, True), np.eye(n))
        diag = np.diag(K_inv)
        mu_std = self.y_std - self._alpha / diag
        var_std = 1.0 / diag
        return mu_std * self.y_scale + self.y_mean, var_std * self.y_scale**2


def fit_gp(inputs: np.ndarray, targets: np.ndarray, noise_floor: float = 0.0) -> GPModel:
    """Fit with (lengthscale, signal) grid search over exact marginal likelihood."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise FitError("need >= 1 training point with aligned targets")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise FitError("non-finite training data")
    y_mean = float(y.mean())
    spread = float(y.std())
    y_scale = spread if spread >= 1e-12 else 1.0
    y_std = (y - y_mean) / y_scale
    noise = max(noise_floor / y_scale**2, MIN_NOISE)

    d2 = _sq_dists(X, X)
    n = X.shape[0]
    best = None
    for ls in LENGTHSCALE_GRID:
        base = np.exp(-d2 / (2.0 * ls**2))
        for s2 in SIGNAL_GRID:
            K = s2 * base + noise * np.eye(n)
            factor = _chol_with_jitter(K)
            if factor is None:
                continue
            alpha = cho_solve((factor, True), y_std)
            lml = (
                -0.5 * float(y_std @ alpha)
                - float(np.log(np.diag(factor)).sum())
                - 0.5 * n * math.log(2 * math.pi)
            )
            if best is None or lml > best[0]:
                best = (lml, ls, s2, factor, alpha)
    if best is None:
        raise FitError("Cholesky factorization failed for every hyperparameter choice")
    _, ls, s2, factor, alpha = best
    return GPModel(X, y_std, ls, s2, noise, factor, alpha, y_mean, y_scale)


def _chol_with_jitter(K: np.ndarray) -> np.ndarray | None:
    jitter = 0.0
    while True:
        try:
            return cholesky(K + jitter * np.eye(K.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            jitter = 1e-8 if jitter == 0.0 else jitter * 10
            if jitter > MAX_JITTER:
                return None


# -- expected improvement ------------------------------------------------------


def expected_improvement(pred: Prediction, best_loss: float) -> float:
    return float(ei_batch(np.array([pred.mean]), np.array([pred.variance]), best_loss)[0])


def ei_batch(means: np.ndarray, variances: np.ndarray, best_loss: float) -> np.ndarray:
    """EI for minimization; degenerates to max(0, best - mean) at zero variance."""
    sigma = np.sqrt(np.maximum(variances, 0.0))
    out = np.maximum(best_loss - means, 0.0)
    positive = sigma >= 1e-12
    if positive.any():
        s = sigma[positive]
        gamma = (best_loss - means[positive]) / s
        pdf = np.exp(-0.5 * gamma**2) / math.sqrt(2 * math.pi)
        out[positive] = s * (gamma * ndtr(gamma) + pdf)
    return np.maximum(out, 0.0)


# -- suggestion ---------------------------------------------------------------


def candidate_pool(
    space, history: Sequence[tuple[dict[str, Any], float]], rng: np.random.Generator
) -> tuple[list[dict[str, Any]], np.ndarray]:
    """Random samples plus local perturbations of the best evaluated configs."""
    configs, encoded = space.sample_encoded(rng, N_RANDOM_CANDIDATES)
    if history:
        order = sorted(range(len(history)), key=lambda i: (history[i][1], i))
        extra = []
        for i in order[:N_NEIGHBOR_SOURCES]:
            extra.extend(space.neighbors(history[i][0], rng, N_NEIGHBORS_EACH))
        if extra:
            configs = configs + extra
            encoded = np.vstack([encoded, np.array([space.encode(c) for c in extra])])
    return configs, encoded


def suggest(
    space,
    model: GPModel,
    history: Sequence[tuple[dict[str, Any], float]],
    rng: np.random.Generator,
) -> dict[str, Any]:
    """Maximize EI over the candidate pool; never re-propose an evaluated config."""
    configs, encoded = candidate_pool(space, history, rng)
    best_loss = min(loss for _, loss in history)
    means, variances = model.predict_batch(encoded)
    ei = ei_batch(means, variances, best_loss)
    seen = np.array([space.encode(cfg) for cfg, _ in history])
    order = np.argsort(-ei, kind="stable")
    for idx in order:
        row = encoded[idx]
        if seen.size and bool(np.any(np.all(np.abs(seen - row) <= 1e-12, axis=1))):
            continue
        return configs[int(idx)]
    return space.sample(rng, 1)[0]
