"""Mean-field control models and their Hamiltonian.

Two concrete models are provided:

* ``mean_variance``: wealth ``dX = a (b dt + sigma dW)`` with terminal reward
  ``E[X_T] - lam Var(X_T)`` and no running reward.
* ``consumption``: ``dX = (a b E[X] - c) dt + sigma E[X] dW`` with running
  reward ``log(c) - a^2`` and zero terminal payoff.

The population law enters only through a few moments, carried by
:class:`MeanVarianceState` or :class:`LogMeanState`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

MEAN_VARIANCE = "mean_variance"
CONSUMPTION = "consumption"


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a formula."""


def check_finite(*values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite input: {v!r}")


@dataclass(frozen=True)
class MeanVarianceState:
    mean: float
    var: float

    def __post_init__(self):
        check_finite(self.mean, self.var)
        if np.any(np.asarray(self.var) < 0):
            raise DomainError(f"variance must be nonnegative, got {self.var}")

    @property
    def m2(self):
        return self.var + self.mean**2


@dataclass(frozen=True)
class LogMeanState:
    log_mean: float

    def __post_init__(self):
        check_finite(self.log_mean)

    @property
    def mean(self):
        return np.exp(self.log_mean)

    @property
    def m2(self):
        # only the mean is tracked; exp(2 log_mean) stands in for M2
        return np.exp(2.0 * self.log_mean)


MomentState = Union[MeanVarianceState, LogMeanState]


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of one of the two supported models.

    ``lam`` is only meaningful for the mean-variance model. All methods are
    pure and broadcast over numpy arrays.
    """

    kind: str
    b: float
    sigma: float
    gamma: float
    beta: float = 0.0
    lam: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if self.kind not in (MEAN_VARIANCE, CONSUMPTION):
            raise ValueError(f"unknown model kind {self.kind!r}")
        check_finite(self.b, self.sigma, self.gamma, self.beta, self.lam, self.T)
        if self.gamma <= 0:
            raise ValueError("temperature gamma must be positive")
        if self.sigma < 0 or self.beta < 0 or self.T <= 0:
            raise ValueError("sigma, beta must be nonnegative and T positive")

    @property
    def action_dimension(self) -> int:
        return 1 if self.kind == MEAN_VARIANCE else 2

    def drift(self, t, x, mu: MomentState, action):
        if self.kind == MEAN_VARIANCE:
            return self.b * np.asarray(action) * np.ones_like(x)
        a, c = action
        return a * self.b * mu.mean - c

    def volatility(self, t, x, mu: MomentState, action):
        if self.kind == MEAN_VARIANCE:
            return self.sigma * np.abs(action) * np.ones_like(x)
        return self.sigma * mu.mean * np.ones_like(x)

    def running_reward(self, t, x, mu: MomentState, action):
        if self.kind == MEAN_VARIANCE:
            return np.zeros_like(np.asarray(action, dtype=float) * np.ones_like(x))
        a, c = action
        c = np.asarray(c, dtype=float)
        if np.any(c <= 0):
            raise DomainError("consumption must be positive")
        return np.log(c) - np.asarray(a) ** 2

    def terminal_payoff(self, mu: MomentState):
        """Population-averaged terminal payoff ``g_hat(mu)``."""
        if self.kind == MEAN_VARIANCE:
            return mu.mean - self.lam * mu.var
        return 0.0 * np.asarray(getattr(mu, "log_mean", 0.0))

    def discount(self, dt):
        return math.exp(-self.beta * dt)


def hamiltonian(model: ModelSpec, t, x, mu: MomentState, action, p, q):
    """``H = b p + 0.5 sigma^2 q + r`` evaluated at one (or broadcast) point."""
    check_finite(t, x, p, q, np.asarray(action, dtype=float))
    if not 0 <= t <= model.T:
        raise ValueError(f"t={t} outside [0, {model.T}]")
    vol = model.volatility(t, x, mu, action)
    return (
        model.drift(t, x, mu, action) * p
        + 0.5 * vol**2 * q
        + model.running_reward(t, x, mu, action)
    )


def make_mean_variance(b: float, sigma: float, lam: float, gamma: float,
                       beta: float = 0.0, T: float = 1.0) -> ModelSpec:
    if sigma <= 0 or lam <= 0:
        raise ValueError("sigma and lam must be positive")
    return ModelSpec(MEAN_VARIANCE, b=b, sigma=sigma, gamma=gamma, beta=beta, lam=lam, T=T)


def make_consumption(b: float, sigma: float, beta: float, gamma: float,
                     T: float = 1.0) -> ModelSpec:
    if min(b, sigma, beta, gamma) <= 0:
        raise ValueError("all consumption coefficients must be positive")
    return ModelSpec(CONSUMPTION, b=b, sigma=sigma, gamma=gamma, beta=beta, T=T)


def benchmark_mean_variance() -> ModelSpec:
    return make_mean_variance(b=0.25, sigma=0.5, lam=2.0, gamma=0.5)


def benchmark_consumption() -> ModelSpec:
    return make_consumption(b=0.5, sigma=0.5, beta=10.0, gamma=0.25)
