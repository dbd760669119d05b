"""Bias-corrected exponential-decay moving average of a noisy loss stream."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import UndefinedStateError, ValidationError

__all__ = [
    "EdmaState",
    "LossObservation",
    "NoiseModel",
    "update",
    "corrected",
    "explicit_average",
    "variance_factor",
    "simulate_variance",
]


def _check_beta(beta):
    if not 0.0 < beta < 1.0:
        raise ValidationError(f"beta must lie in (0, 1), got {beta}")


@dataclass(frozen=True)
class EdmaState:
    """Accumulator ``f`` after ``t`` observations; ``f = 0`` when ``t = 0``."""

    beta: float = 0.9
    t: int = 0
    f: float = 0.0

    def __post_init__(self):
        _check_beta(self.beta)
        if self.t < 0:
            raise ValidationError("t must be nonnegative")
        if self.t == 0 and self.f != 0.0:
            raise ValidationError("a fresh state (t = 0) must have f = 0")

    def reset(self) -> "EdmaState":
        return EdmaState(beta=self.beta)

    @property
    def value(self) -> float:
        return corrected(self)


@dataclass(frozen=True)
class LossObservation:
    value: float
    epoch: int = 0


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean i.i.d. noise of variance ``sigma2`` added to the true loss."""

    sigma2: float = 1.0

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValidationError("sigma2 must be nonnegative")

    @property
    def mean(self) -> float:
        return 0.0


def update(state: EdmaState, obs) -> EdmaState:
    """One step of ``f(t) = beta * f(t-1) + (1 - beta) * loss(t)``."""
    value = obs.value if isinstance(obs, LossObservation) else obs
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"observed loss must be finite, got {value}")
    f = state.beta * state.f + (1.0 - state.beta) * value
    return replace(state, t=state.t + 1, f=f)


def corrected(state: EdmaState) -> float:
    """Bias-corrected average ``f(t) / (1 - beta**t)``; undefined at ``t = 0``."""
    if state.t < 1:
        raise UndefinedStateError("corrected value is undefined before the first observation")
    return state.f / (1.0 - state.beta**state.t)


def explicit_average(values, beta: float) -> float:
    """Weighted average ``sum beta**i * x(t-i) / sum beta**i`` over the whole stream."""
    _check_beta(beta)
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise UndefinedStateError("average of an empty stream")
    w = beta ** np.arange(x.size)[::-1]
    return float(np.dot(w, x) / w.sum())


def variance_factor(beta: float, t: int) -> float:
    """``Var g_hat(t) / sigma^2 = (1-beta)/(1+beta) * (1+beta**t)/(1-beta**t)``."""
    _check_beta(beta)
    if t < 1:
        raise ValidationError("t must be >= 1")
    bt = beta**t
    return (1.0 - beta) / (1.0 + beta) * (1.0 + bt) / (1.0 - bt)


def simulate_variance(beta, steps, trials, sigma2=1.0, seed=0, true_loss=None):
    """Monte Carlo estimate of the corrected average's mean and variance per step.

    Runs ``trials`` independent streams ``true_loss(t) + eps(t)`` with Gaussian
    ``eps`` of variance ``sigma2`` through the recursion. Returns
    ``(t, predicted_variance, empirical_variance, empirical_mean)`` arrays for
    ``t = 1..steps``.
    """
    _check_beta(beta)
    rng = np.random.default_rng(seed)
    base = np.zeros(steps) if true_loss is None else np.asarray(true_loss, dtype=np.float64)
    f = np.zeros(trials)
    ts = np.arange(1, steps + 1)
    means = np.empty(steps)
    variances = np.empty(steps)
    for i in range(steps):
        obs = base[i] + rng.normal(0.0, math.sqrt(sigma2), size=trials)
        f = beta * f + (1.0 - beta) * obs
        g = f / (1.0 - beta ** (i + 1))
        means[i] = g.mean()
        variances[i] = g.var(ddof=1)
    predicted = np.array([variance_factor(beta, int(t)) * sigma2 for t in ts])
    return ts, predicted, variances, means
