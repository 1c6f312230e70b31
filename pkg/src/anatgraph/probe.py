"""Frozen-feature probes: ridge regression (R^2) and multinomial logistic
regression (accuracy) under shuffled k-fold cross-validation.

Features are standardized with training-fold statistics. Fitted models can
report their weights folded back into raw feature space, which is what the
activation-graph explainer consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import stream


class ProbeError(ValueError):
    pass


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        scale = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(scale > 1e-12, scale, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


@dataclass
class LinearModel:
    """``y = coef . x + intercept`` in raw feature space."""

    coef: np.ndarray
    intercept: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coef + self.intercept


@dataclass
class LogisticModel:
    """Multinomial logistic model; ``coef`` is ``(C, F)`` in raw feature space."""

    coef: np.ndarray
    intercept: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.coef.shape[0]

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coef.T + self.intercept

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.decision(x), axis=1)

    def logit_weights(self, target: int | None = None) -> tuple[np.ndarray, float]:
        """Weights ``(W, beta)`` of a scalar logit.

        Two classes: the log-odds of class 1 over class 0. More classes: the
        score of ``target`` (one-vs-rest reading of the softmax row).
        """
        if self.n_classes == 2 and target in (None, 1):
            return self.coef[1] - self.coef[0], float(self.intercept[1] - self.intercept[0])
        if target is None:
            raise ProbeError("multiclass explanation needs a target class")
        return self.coef[target], float(self.intercept[target])


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 0:
        raise ProbeError("R^2 is undefined for constant targets")
    return 1.0 - float(((y - pred) ** 2).sum()) / ss_tot


def fit_ridge(x: np.ndarray, y: np.ndarray, lam: float = 1e-3) -> LinearModel:
    """Minimize ``mean((y - Xw - b)^2) + lam |w|^2`` on standardized features."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    std = Standardizer.fit(x)
    z = std(x)
    n, f = z.shape
    y_mean = y.mean()
    w = np.linalg.solve(z.T @ z / n + lam * np.eye(f), z.T @ (y - y_mean) / n)
    coef = w / std.scale
    return LinearModel(coef, float(y_mean - coef @ std.mean))


def fit_linear(x_train, y_train, x_test, y_test, lam: float = 1e-3) -> tuple[LinearModel, float]:
    if np.ptp(np.asarray(y_train, dtype=np.float64)) == 0:
        raise ProbeError("R^2 is undefined for constant targets")
    model = fit_ridge(x_train, y_train, lam)
    return model, r2_score(y_test, model.predict(x_test))


def _softmax_loss(z, onehot, w, b, lam):
    logits = z @ w.T + b
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return -(onehot * logp).sum(axis=1).mean() + 0.5 * lam * (w**2).sum(), logp


def fit_logistic_model(
    x: np.ndarray,
    labels: np.ndarray,
    n_classes: int | None = None,
    lam: float = 1e-3,
    max_iter: int = 2000,
    tol: float = 1e-6,
) -> LogisticModel:
    """Multinomial logistic regression by gradient descent with Armijo backtracking.

    Objective: mean cross-entropy + ``lam/2 |W|^2`` (intercepts unpenalized)
    on standardized features. The step size only ever shrinks, so the
    recorded loss is non-increasing.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    c = int(labels.max()) + 1 if n_classes is None else n_classes
    present = np.unique(labels)
    if len(present) < 2:
        raise ProbeError("logistic probe needs at least two classes in the training data")
    missing = sorted(set(range(c)) - set(present.tolist()))
    if missing:
        raise ProbeError(f"classes {missing} absent from the training data")
    std = Standardizer.fit(x)
    z = std(x)
    n, f = z.shape
    onehot = np.eye(c)[labels]
    w, b = np.zeros((c, f)), np.zeros(c)
    loss, logp = _softmax_loss(z, onehot, w, b, lam)
    history = [float(loss)]
    step = 1.0
    for _ in range(max_iter):
        resid = (np.exp(logp) - onehot) / n
        gw = resid.T @ z + lam * w
        gb = resid.sum(axis=0)
        gnorm2 = float((gw**2).sum() + (gb**2).sum())
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            new_loss, new_logp = _softmax_loss(z, onehot, w_new, b_new, lam)
            if new_loss <= loss - 0.5 * step * gnorm2 or step < 1e-12:
                break
            step *= 0.5
        done = loss - new_loss < tol
        if new_loss <= loss:
            w, b, loss, logp = w_new, b_new, new_loss, new_logp
            history.append(float(loss))
        if done:
            break
    coef = w / std.scale
    return LogisticModel(coef, b - coef @ std.mean, history)


def fit_logistic(
    x_train, y_train, x_test, y_test, n_classes: int | None = None, lam: float = 1e-3, max_iter: int = 2000, tol: float = 1e-6
) -> tuple[LogisticModel, float]:
    model = fit_logistic_model(x_train, y_train, n_classes, lam, max_iter, tol)
    acc = float(np.mean(model.predict(x_test) == np.asarray(y_test).astype(int)))
    return model, acc


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffled partition of ``range(n)`` into ``k`` test folds (sizes differ by <= 1)."""
    if k < 2:
        raise ProbeError("k-fold needs k >= 2")
    if k > n:
        raise ProbeError(f"k = {k} exceeds the number of subjects ({n})")
    perm = stream(seed, "probe.folds").permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


@dataclass
class ProbeResult:
    metric: str
    fold_values: list[float]
    models: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_values))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_values))

    def to_json(self) -> dict:
        folds = []
        for m in self.models:
            intercept = m.intercept.tolist() if isinstance(m.intercept, np.ndarray) else m.intercept
            folds.append({"coef": np.asarray(m.coef).tolist(), "intercept": intercept})
        return {
            "metric": self.metric,
            "fold_values": [float(v) for v in self.fold_values],
            "mean": self.mean,
            "std": self.std,
            "folds": folds,
        }


FitFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], tuple[object, float]]


def kfold(x, y, k: int, seed: int, fit_fn: FitFn, metric: str) -> ProbeResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    result = ProbeResult(metric, [])
    for i, test in enumerate(kfold_indices(n, k, seed)):
        train = np.setdiff1d(np.arange(n), test)
        try:
            model, value = fit_fn(x[train], y[train], x[test], y[test])
        except ProbeError as exc:
            raise ProbeError(f"fold {i}: {exc}") from None
        result.fold_values.append(value)
        result.models.append(model)
    return result


def probe_regression(x, y, k: int = 5, seed: int = 0, lam: float = 1e-3) -> ProbeResult:
    return kfold(x, y, k, seed, lambda a, b, c, d: fit_linear(a, b, c, d, lam), "r2")


def probe_classification(
    x, labels, k: int = 5, seed: int = 0, lam: float = 1e-3, max_iter: int = 2000, tol: float = 1e-6
) -> ProbeResult:
    n_classes = int(np.max(labels)) + 1
    return kfold(
        x,
        labels,
        k,
        seed,
        lambda a, b, c, d: fit_logistic(a, b, c, d, n_classes, lam, max_iter, tol),
        "accuracy",
    )
