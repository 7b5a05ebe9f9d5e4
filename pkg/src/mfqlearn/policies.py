"""Randomized feedback policies: Gaussian, Gamma and their product.

Each policy is conditional on ``(t, x, mu)``. Densities, entropies and KL
divergences are closed form; :func:`gibbs_improve` maps an essential
q-function that is quadratic in the action (or of the form
``k log c - kappa c``) to its normalized Gibbs policy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import digamma, gammaln

from .models import DomainError, MomentState, check_finite

VARIANCE_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianPolicy:
    """``N(mean_fn(t, x, mu), var_fn(t, mu))``."""

    mean_fn: Callable
    var_fn: Callable

    @classmethod
    def constant(cls, mean: float, var: float) -> "GaussianPolicy":
        return cls(lambda t, x, mu: mean + 0.0 * np.asarray(x), lambda t, mu: var)

    def mean(self, t, x, mu):
        return self.mean_fn(t, x, mu)

    def var(self, t, mu):
        v = self.var_fn(t, mu)
        if np.any(np.asarray(v) <= 0):
            raise DomainError(f"Gaussian policy variance must be positive, got {v}")
        return v


@dataclass(frozen=True)
class GammaPolicy:
    """``Gamma(shape, rate_fn(t, mu))`` in shape-rate form."""

    shape: float
    rate_fn: Callable

    def __post_init__(self):
        if not self.shape > 0:
            raise DomainError(f"Gamma shape must be positive, got {self.shape}")

    @classmethod
    def constant(cls, shape: float, rate: float) -> "GammaPolicy":
        return cls(shape, lambda t, mu: rate)

    def rate(self, t, mu):
        r = self.rate_fn(t, mu)
        if np.any(np.asarray(r) <= 0):
            raise DomainError(f"Gamma rate must be positive, got {r}")
        return r


@dataclass(frozen=True)
class ProductPolicy:
    """Independent ``(a, c)`` with ``a`` Gaussian and ``c`` Gamma."""

    investment: GaussianPolicy
    consumption: GammaPolicy


def gaussian_logpdf(a, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (a - mean) ** 2 / var


def gamma_logpdf(c, shape, rate):
    c = np.asarray(c, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * np.log(rate) + (shape - 1.0) * np.log(c) - rate * c - gammaln(shape)
    return np.where(c > 0, out, -np.inf)


def gaussian_entropy(var):
    return 0.5 * np.log(2.0 * math.pi * math.e * var)


def gamma_entropy(shape, rate):
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def gaussian_kl(m1, v1, m2, v2):
    """``KL(N(m1, v1) || N(m2, v2))``."""
    return 0.5 * (np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1.0)


def gamma_kl(a1, r1, a2, r2):
    """``KL(Gamma(a1, r1) || Gamma(a2, r2))`` in shape-rate form."""
    return (
        (a1 - a2) * digamma(a1)
        - gammaln(a1)
        + gammaln(a2)
        + a2 * (np.log(r1) - np.log(r2))
        + a1 * (r2 - r1) / r1
    )


def log_density(policy, t, x, mu: MomentState, action):
    """Exact log-density; ``-inf`` outside the support (``c <= 0``)."""
    if isinstance(policy, GaussianPolicy):
        check_finite(t, x, action)
        return gaussian_logpdf(action, policy.mean(t, x, mu), policy.var(t, mu))
    if isinstance(policy, GammaPolicy):
        check_finite(t, x, action)
        return gamma_logpdf(action, policy.shape, policy.rate(t, mu))
    if isinstance(policy, ProductPolicy):
        a, c = action
        return log_density(policy.investment, t, x, mu, a) + log_density(
            policy.consumption, t, x, mu, c
        )
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def entropy(policy, t, x, mu: MomentState):
    """Differential entropy of the action distribution at ``(t, x, mu)``."""
    if isinstance(policy, GaussianPolicy):
        return gaussian_entropy(policy.var(t, mu)) + 0.0 * np.asarray(x)
    if isinstance(policy, GammaPolicy):
        return gamma_entropy(policy.shape, policy.rate(t, mu)) + 0.0 * np.asarray(x)
    if isinstance(policy, ProductPolicy):
        return entropy(policy.investment, t, x, mu) + entropy(policy.consumption, t, x, mu)
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def _state_nodes(mu: MomentState, n: int):
    """Gauss-Hermite nodes/weights for a Gaussian proxy of ``mu``."""
    z, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / w.sum()
    var = getattr(mu, "var", 0.0)
    return mu.mean + math.sqrt(var) * z, w


def _pointwise_kl(p, q, t, x, mu):
    if isinstance(p, GaussianPolicy):
        return gaussian_kl(p.mean(t, x, mu), p.var(t, mu), q.mean(t, x, mu), q.var(t, mu))
    if isinstance(p, GammaPolicy):
        kl = gamma_kl(p.shape, p.rate(t, mu), q.shape, q.rate(t, mu))
        return kl + 0.0 * np.asarray(x)
    return _pointwise_kl(p.investment, q.investment, t, x, mu) + _pointwise_kl(
        p.consumption, q.consumption, t, x, mu
    )


def kl_average(p, q, t, mu: MomentState, quadrature_nodes: int = 32) -> float:
    """State-averaged ``KL(p(.|t,x,mu) || q(.|t,x,mu))`` with ``x ~ mu``."""
    if type(p) is not type(q):
        raise ValueError("kl_average needs two policies of the same family")
    if quadrature_nodes < 1:
        raise ValueError("quadrature_nodes must be positive")
    xs, w = _state_nodes(mu, quadrature_nodes)
    kl = float(np.dot(w, _pointwise_kl(p, q, t, xs, mu)))
    return max(kl, 0.0)


def sample(policy, t, x, mu: MomentState, rng: np.random.Generator, size=None):
    if isinstance(policy, GaussianPolicy):
        var = np.maximum(policy.var_fn(t, mu), VARIANCE_FLOOR)
        return rng.normal(policy.mean(t, x, mu), np.sqrt(var), size=size)
    if isinstance(policy, GammaPolicy):
        return rng.gamma(policy.shape, 1.0 / policy.rate(t, mu), size=size)
    if isinstance(policy, ProductPolicy):
        return (
            sample(policy.investment, t, x, mu, rng, size),
            sample(policy.consumption, t, x, mu, rng, size),
        )
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def _quadratic_coeffs(qe: Callable):
    q0, qp, qm = qe(0.0), qe(1.0), qe(-1.0)
    return 0.5 * (qp + qm) - q0, 0.5 * (qp - qm)


def _log_linear_coeffs(qe: Callable):
    q1, q2, q4 = qe(1.0), qe(2.0), qe(4.0)
    kappa = (q2 - q1) - (q4 - q2)
    k_log = (q2 - q1 + kappa) / math.log(2.0)
    return k_log, kappa


def gibbs_improve(qe: Callable, family: str, gamma: float):
    """Normalized Gibbs policy ``exp(qe/gamma) / Z`` at a fixed ``(t, x, mu)``.

    ``qe`` is a function of the action alone. For ``family="gaussian"`` it
    must be a concave quadratic; for ``"gamma"`` of the form
    ``k log c - kappa c + const``; for ``"product"`` a separable sum of the
    two, called as ``qe(a, c)``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if family == "gaussian":
        quad, lin = _quadratic_coeffs(qe)
        if quad >= 0:
            raise DomainError("Gibbs measure is not integrable: quadratic coefficient >= 0")
        return GaussianPolicy.constant(-lin / (2.0 * quad), -gamma / (2.0 * quad))
    if family == "gamma":
        k_log, kappa = _log_linear_coeffs(qe)
        shape = 1.0 + k_log / gamma
        if kappa <= 0 or shape <= 0:
            raise DomainError("Gibbs measure is not integrable on c > 0")
        return GammaPolicy.constant(shape, kappa / gamma)
    if family == "product":
        inv = gibbs_improve(lambda a: qe(a, 1.0), "gaussian", gamma)
        cons = gibbs_improve(lambda c: qe(0.0, c), "gamma", gamma)
        return ProductPolicy(inv, cons)
    raise ValueError(f"unknown policy family {family!r}")
