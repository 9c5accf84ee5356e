"""Objective functions on clean samples and differentiable predictors.

Objectives score clean samples (higher is better) and are vectorised over
leading batch axes: a ``(D,)`` sample gives a float, an ``(n, D)`` batch gives
an ``(n,)`` array.  Predictors additionally expose ``gradient``.  Discrete
predictors take relaxed ``(..., D, S)`` row-stochastic inputs; hard
sequences enter as one-hot rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import log_softmax, softmax


def _scalar(v):
    v = np.asarray(v, dtype=np.float64)
    return float(v) if v.ndim == 0 else v


def one_hot(tokens, S: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    return np.eye(S)[tokens]


class Objective:
    """Base class: ``evaluate`` maps clean samples to scores."""

    target: float | None = None

    def evaluate(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.evaluate(x)

    def rule_value(self, x):
        """Feature compared against the target, when the objective has one."""
        return None

    def abs_error(self, x):
        r = self.rule_value(x)
        if r is None or self.target is None:
            return float("nan")
        return _scalar(np.abs(self.target - np.asarray(r, dtype=np.float64)))


class RegressionObjective(Objective):
    """``-(y - f(x))^2 / (2 sigma^2)`` for a real-valued feature ``f``."""

    def __init__(self, f: Callable, y: float, sigma: float = 1.0):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.f = f
        self.target = float(y)
        self.sigma = float(sigma)

    def rule_value(self, x):
        return self.f(x)

    def evaluate(self, x):
        r = np.asarray(self.f(x), dtype=np.float64)
        return _scalar(-((self.target - r) ** 2) / (2.0 * self.sigma**2))


def gaussian_regression_objective(f: Callable, y: float, sigma: float) -> RegressionObjective:
    return RegressionObjective(f, y, sigma)


@dataclass(frozen=True)
class RuleObjective(Objective):
    """``-loss(target, rule(x))`` for a non-differentiable feature extractor."""

    rule: Callable
    loss: Callable
    target: float

    def rule_value(self, x):
        return self.rule(x)

    def evaluate(self, x):
        return _scalar(-self.loss(self.target, np.asarray(self.rule(x), dtype=np.float64)))


def _squared(y, r):
    return (y - r) ** 2


def count_above_threshold_rule(epsilon: float, target: float) -> RuleObjective:
    """Number of coordinates strictly above ``epsilon``, squared loss."""
    def rule(x):
        return np.sum(np.asarray(x) > epsilon, axis=-1)
    return RuleObjective(rule=rule, loss=_squared, target=float(target))


def token_count_rule(token: int, target: float, sigma: float = 1.0) -> RegressionObjective:
    """Multiplicity of ``token`` in the sequence, scored in regression form."""
    def rule(x):
        return np.sum(np.asarray(x) == token, axis=-1)
    return RegressionObjective(rule, target, sigma)


class TabularObjective(Objective):
    """Lookup of precomputed scores over ``[S]^D`` (e.g. a classifier log-probability)."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)

    def evaluate(self, x):
        x = np.asarray(x, dtype=np.int64)
        idx = np.ravel_multi_index(np.moveaxis(x, -1, 0), self.table.shape)
        return _scalar(self.table.ravel()[idx])


class PredictorObjective(Objective):
    """Evaluate a discrete predictor on hard sequences through one-hot rows."""

    def __init__(self, predictor: "DifferentiablePredictor", S: int, rule: Callable | None = None,
                 target: float | None = None):
        self.predictor = predictor
        self.S = S
        self._rule = rule
        self.target = target

    def evaluate(self, x):
        return self.predictor.evaluate(one_hot(x, self.S))

    def rule_value(self, x):
        return None if self._rule is None else self._rule(x)


# ---------------------------------------------------------------------------
# differentiable predictors


class DifferentiablePredictor:
    def evaluate(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.evaluate(x)

    def check_gradient(self, x, h: float | None = None) -> float:
        """Max relative gap between ``gradient`` and central differences at ``x``."""
        x = np.asarray(x, dtype=np.float64)
        if h is None:
            h = 1e-4 * max(1.0, float(np.max(np.abs(x))))
        g = np.asarray(self.gradient(x))
        fd = np.empty_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            e = np.zeros_like(flat)
            e[i] = h
            fd.reshape(-1)[i] = (self.evaluate((flat + e).reshape(x.shape))
                                 - self.evaluate((flat - e).reshape(x.shape))) / (2 * h)
        scale = max(np.max(np.abs(fd)), np.max(np.abs(g)), 1e-12)
        return float(np.max(np.abs(g - fd)) / scale)


class LinearOnehotPredictor(DifferentiablePredictor):
    """``sum_{d,s} W[d,s] P[d,s]``; its expectation under a product law is multilinear."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    def evaluate(self, P):
        return _scalar(np.sum(np.asarray(P) * self.weights, axis=(-2, -1)))

    def gradient(self, P):
        return np.broadcast_to(self.weights, np.shape(P)).copy()


def linear_onehot_predictor(weights) -> LinearOnehotPredictor:
    return LinearOnehotPredictor(weights)


class TokenCountPredictor(DifferentiablePredictor):
    """Relaxed token count ``sum_d P[d, token]`` scored as ``-(y - c)^2 / (2 sigma^2)``."""

    def __init__(self, token: int, target: float, sigma: float = 1.0):
        self.token = int(token)
        self.target = float(target)
        self.sigma = float(sigma)

    def evaluate(self, P):
        c = np.sum(np.asarray(P)[..., self.token], axis=-1)
        return _scalar(-((self.target - c) ** 2) / (2 * self.sigma**2))

    def gradient(self, P):
        P = np.asarray(P, dtype=np.float64)
        c = np.sum(P[..., self.token], axis=-1)
        g = np.zeros_like(P)
        g[..., self.token] = ((self.target - c) / self.sigma**2)[..., None]
        return g


class SoftmaxClassifier(DifferentiablePredictor):
    """Linear classifier over one-hot rows; scores ``log p(y | P)`` for a fixed class."""

    def __init__(self, weights, bias, target_class: int):
        self.weights = np.asarray(weights, dtype=np.float64)   # (C, D, S)
        self.bias = np.asarray(bias, dtype=np.float64)         # (C,)
        self.target_class = int(target_class)

    def logits(self, P):
        return np.einsum("cds,...ds->...c", self.weights, np.asarray(P, dtype=np.float64)) + self.bias

    def evaluate(self, P):
        return _scalar(log_softmax(self.logits(P), axis=-1)[..., self.target_class])

    def gradient(self, P):
        p = softmax(self.logits(P), axis=-1)
        coef = -p
        coef[..., self.target_class] += 1.0
        return np.einsum("...c,cds->...ds", coef, self.weights)

    def log_prob_table(self, D: int, S: int) -> np.ndarray:
        grids = np.indices((S,) * D).reshape(D, -1).T
        return np.asarray(self.evaluate(one_hot(grids, S))).reshape((S,) * D)

    @classmethod
    def random(cls, D: int, S: int, n_classes: int, target_class: int, rng, scale: float = 1.0):
        w = scale * rng.standard_normal((n_classes, D, S))
        b = np.zeros(n_classes)
        return cls(w, b, target_class)


class QuadraticPredictor(DifferentiablePredictor):
    """``-||x - y||^2 / 2`` on continuous samples."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def evaluate(self, x):
        return _scalar(-0.5 * np.sum((np.asarray(x) - self.target) ** 2, axis=-1))

    def gradient(self, x):
        return self.target - np.asarray(x, dtype=np.float64)


class SoftCountPredictor(DifferentiablePredictor):
    """Sigmoid surrogate of the count-above-threshold rule, squared loss."""

    def __init__(self, epsilon: float, target: float, temperature: float = 0.1):
        self.epsilon = float(epsilon)
        self.target = float(target)
        self.temperature = float(temperature)

    def _soft(self, x):
        return 1.0 / (1.0 + np.exp(-(np.asarray(x, dtype=np.float64) - self.epsilon) / self.temperature))

    def evaluate(self, x):
        c = np.sum(self._soft(x), axis=-1)
        return _scalar(-((self.target - c) ** 2))

    def gradient(self, x):
        s = self._soft(x)
        c = np.sum(s, axis=-1)
        return (2.0 * (self.target - c))[..., None] * s * (1 - s) / self.temperature


class ConstantPredictor(DifferentiablePredictor):
    """Constant score; ``event_ndim`` is 2 for relaxed sequences, 1 for vectors."""

    def __init__(self, value: float = 0.0, event_ndim: int = 2):
        self.value = float(value)
        self.event_ndim = event_ndim

    def evaluate(self, x):
        shape = np.shape(x)[: np.ndim(x) - self.event_ndim]
        return _scalar(np.full(shape, self.value))

    def gradient(self, x):
        return np.zeros(np.shape(x))
