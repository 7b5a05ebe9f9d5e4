"""Parameterized value functions ``J^theta`` and essential q-functions ``q_e^psi``.

One family class per model. Every method broadcasts: ``t`` and the moment
arrays may carry leading batch axes, parameter vectors are 1-d and test
parameters ``psi_tilde`` carry their coordinates on the last axis.

Expectations of ``q_e`` and of its ``psi``-gradient under a state law ``mu``
and a test policy ``h^{psi_tilde}`` are evaluated in closed form from the
first two moments; no quadrature is involved.

Conventions: the integrated q-function is ``E[q_e] + gamma * E[entropy(h)]``,
which vanishes when ``h`` is the Gibbs policy of ``q_e`` (normalizer one).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from .models import (
    CONSUMPTION,
    MEAN_VARIANCE,
    DomainError,
    LogMeanState,
    MeanVarianceState,
    ModelSpec,
)
from .policies import GammaPolicy, GaussianPolicy, ProductPolicy

LOG_2PI = math.log(2.0 * math.pi)


def _xlogx(s):
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)), 0.0)


class MeanVarianceFamily:
    """Families for the mean-variance model (``beta`` may be nonzero)."""

    kind = MEAN_VARIANCE
    theta_names = ("theta1", "theta2", "theta3")
    psi_names = ("psi1", "psi2", "psi3", "psi4")

    def __init__(self, model: ModelSpec):
        if model.kind != MEAN_VARIANCE:
            raise ValueError("MeanVarianceFamily needs a mean-variance model")
        self.model = model
        self.gamma = model.gamma
        self.T = model.T

    # value function ----------------------------------------------------
    def value(self, theta, t, mean, var):
        th1, th2, th3 = theta
        if th3 == 0:
            raise DomainError("theta3 must be nonzero")
        tau = np.asarray(t, dtype=float) - self.T
        return (
            -np.exp(th1 * tau) * var / (4.0 * th3)
            + mean
            + 0.25 * self.gamma * th1 * tau**2
            + th2 * tau
            + th3 * np.exp(-th1 * tau)
            - th3
        )

    def grad_value(self, theta, t, mean, var):
        th1, th2, th3 = theta
        if th3 == 0:
            raise DomainError("theta3 must be nonzero")
        tau = np.asarray(t, dtype=float) - self.T
        e_pos = np.exp(th1 * tau)
        e_neg = np.exp(-th1 * tau)
        d1 = -tau * e_pos * var / (4.0 * th3) + 0.25 * self.gamma * tau**2 - th3 * tau * e_neg
        d2 = tau + 0.0 * var
        d3 = e_pos * var / (4.0 * th3**2) + e_neg - 1.0
        return np.stack(np.broadcast_arrays(d1, d2, d3), axis=-1)

    # essential q-function ----------------------------------------------
    def qe(self, psi, t, x, mean, var, a, psi5=0.0):
        p1, p2, p3, p4 = psi
        g = self.gamma
        tau = np.asarray(t, dtype=float) - self.T
        y = x - mean
        z = a + p3 * y + p4 * np.exp(-p2 * tau)
        return (
            -0.5 * np.exp(p1 + p2 * tau) * z**2
            - 0.5 * g * (LOG_2PI + math.log(g))
            + 0.5 * g * p1
            + 0.5 * g * p2 * tau
            - p2 * y
            + psi5 * np.exp(p2 * tau) * (y**2 - var)
        )

    def grad_qe(self, psi, t, x, mean, var, a, psi5=0.0):
        p1, p2, p3, p4 = psi
        g = self.gamma
        tau = np.asarray(t, dtype=float) - self.T
        y = x - mean
        shift = p4 * np.exp(-p2 * tau)
        w = np.exp(p1 + p2 * tau)
        z = a + p3 * y + shift
        d1 = -0.5 * w * z**2 + 0.5 * g
        d2 = (
            -0.5 * w * tau * z**2
            + w * tau * shift * z
            + 0.5 * g * tau
            - y
            + psi5 * tau * np.exp(p2 * tau) * (y**2 - var)
        )
        d3 = -w * z * y
        d4 = -w * z * np.exp(-p2 * tau)
        return np.stack(np.broadcast_arrays(d1, d2, d3, d4), axis=-1)

    def _test_moments(self, psi_tilde, tau):
        pt = np.asarray(psi_tilde, dtype=float)
        q1, q2, q3, q4 = pt[..., 0], pt[..., 1], pt[..., 2], pt[..., 3]
        shift = q4 * np.exp(-q2 * tau)
        var_a = self.gamma * np.exp(-q1 - q2 * tau)
        return q3, shift, var_a

    def _sq_terms(self, psi, tau, var, psi_tilde):
        p1, p2, p3, p4 = psi
        q3, shift_t, var_a = self._test_moments(psi_tilde, tau)
        shift = p4 * np.exp(-p2 * tau)
        w = np.exp(p1 + p2 * tau)
        d_shift = shift - shift_t
        ez2 = (p3 - q3) ** 2 * var + d_shift**2 + var_a
        return w, shift, d_shift, ez2, q3

    def expected_qe(self, psi, t, mean, var, psi_tilde):
        p1, p2 = psi[0], psi[1]
        g = self.gamma
        tau = np.asarray(t, dtype=float) - self.T
        w, _, _, ez2, _ = self._sq_terms(psi, tau, var, psi_tilde)
        return -0.5 * w * ez2 - 0.5 * g * (LOG_2PI + math.log(g)) + 0.5 * g * p1 + 0.5 * g * p2 * tau

    def expected_grad_qe(self, psi, t, mean, var, psi_tilde):
        p2, p3 = psi[1], psi[2]
        g = self.gamma
        tau = np.asarray(t, dtype=float) - self.T
        w, shift, d_shift, ez2, q3 = self._sq_terms(psi, tau, var, psi_tilde)
        d1 = -0.5 * w * ez2 + 0.5 * g
        d2 = -0.5 * w * tau * ez2 + w * tau * shift * d_shift + 0.5 * g * tau
        d3 = -w * (p3 - q3) * var
        d4 = -w * d_shift * np.exp(-p2 * tau)
        return np.stack(np.broadcast_arrays(d1, d2, d3, d4), axis=-1)

    def test_entropy(self, psi_tilde, t, mean, var):
        tau = np.asarray(t, dtype=float) - self.T
        _, _, var_a = self._test_moments(psi_tilde, tau)
        return 0.5 * np.log(2.0 * math.pi * math.e * var_a) + 0.0 * var

    def normalization_residual(self, psi, t, mean, var, psi5=0.0):
        """``E_mu[log int exp(q_e/gamma) da]`` from the Gaussian normalizer."""
        p1, p2, _, _ = psi
        g = self.gamma
        tau = np.asarray(t, dtype=float) - self.T
        w = np.exp(p1 + p2 * tau)
        # E[y] = 0 and E[y^2 - var] = 0 under mu; kept explicit
        mean_y, mean_y2c = 0.0, 0.0
        const = (
            -0.5 * g * (LOG_2PI + math.log(g))
            + 0.5 * g * p1
            + 0.5 * g * p2 * tau
            - p2 * mean_y
            + psi5 * np.exp(p2 * tau) * mean_y2c
        )
        return const / g + 0.5 * np.log(2.0 * math.pi * g / w) + 0.0 * var

    # policies ----------------------------------------------------------
    def policy(self, psi) -> GaussianPolicy:
        p1, p2, p3, p4 = (float(v) for v in psi)
        g, T = self.gamma, self.T

        def mean_fn(t, x, mu):
            return -p3 * (x - mu.mean) - p4 * np.exp(-p2 * (t - T))

        def var_fn(t, mu):
            return g * np.exp(-p1 - p2 * (t - T))

        return GaussianPolicy(mean_fn, var_fn)

    def expected_reward(self, psi_tilde, t, mean, var):
        return 0.0 * (mean + var + np.asarray(psi_tilde, dtype=float)[..., 0])

    def moment_drift(self, psi_tilde, t, mean, var):
        """Time derivatives of ``(mean, var)`` under ``h^{psi_tilde}``."""
        b, s2 = self.model.b, self.model.sigma**2
        tau = np.asarray(t, dtype=float) - self.T
        q3, shift, var_a = self._test_moments(psi_tilde, tau)
        return -b * shift + 0.0 * mean, (s2 * q3**2 - 2.0 * b * q3) * var + s2 * shift**2 + s2 * var_a

    def average_action_mean(self, psi, t, mean, var):
        tau = np.asarray(t, dtype=float) - self.T
        return -psi[3] * np.exp(-psi[1] * tau) + 0.0 * mean

    def enforce(self, psi):
        return np.asarray(psi, dtype=float)

    def true_params(self):
        m = self.model
        b, s2, lam, g = m.b, m.sigma**2, m.lam, m.gamma
        theta = np.array([b**2 / s2, -0.5 * g * math.log(math.pi * g / (s2 * lam)), 1.0 / (4.0 * lam)])
        psi = np.array([math.log(2.0 * lam * s2), b**2 / s2, b / s2, -b / (2.0 * lam * s2)])
        return theta, psi

    def improve(self, psi):
        """Parameters of the Gibbs policy of ``q_e(.; pi^psi)`` (requires ``beta = 0``)."""
        m = self.model
        if m.beta != 0:
            raise DomainError("closed-form improvement stays in family only for beta = 0")
        b, s2, lam = m.b, m.sigma**2, m.lam
        p3 = psi[2]
        k = s2 * p3**2 - 2.0 * b * p3
        return np.array([math.log(2.0 * lam * s2), -k, b / s2, -b / (2.0 * lam * s2)])

    def policy_qe_action_part(self, psi, t, x, mean, var, a):
        """Action-dependent part of ``q_e(t, x, mu, a; pi^psi)`` (``beta = 0``).

        The value of ``pi^psi`` is ``A(t) Var + mean + D(t)`` with
        ``A(t) = -lam exp(k (T - t))``, ``k = sigma^2 psi3^2 - 2 b psi3``.
        """
        m = self.model
        p3 = psi[2]
        k = m.sigma**2 * p3**2 - 2.0 * m.b * p3
        A = -m.lam * math.exp(k * (self.T - t))
        dmu = 2.0 * A * (x - mean) + 1.0
        return m.b * a * dmu + m.sigma**2 * a**2 * A


class ConsumptionFamily:
    """Families for the mean-field consumption model.

    Only ``psi1`` is free; ``psi2 = -psi1**2 / 4`` is the normalization
    constraint. Passing a length-2 ``psi`` overrides the derived ``psi2``.
    """

    kind = CONSUMPTION
    theta_names = ("theta1", "theta2", "theta3", "theta4")
    psi_names = ("psi1",)

    def __init__(self, model: ModelSpec):
        if model.kind != CONSUMPTION:
            raise ValueError("ConsumptionFamily needs a consumption model")
        self.model = model
        self.gamma = model.gamma
        self.beta = model.beta
        self.T = model.T
        g, beta = model.gamma, model.beta
        self.shape = 1.0 + 1.0 / g
        self.K = (
            0.5 * g * math.log(g * math.pi)
            + g * gammaln(1.0 + 1.0 / g)
            - (1.0 + g) * math.log((1.0 + g) / (beta * g))
        )

    def _e(self, t):
        return np.exp(-self.beta * (self.T - np.asarray(t, dtype=float)))

    def _s(self, t, strict=False):
        s = 1.0 - self._e(t)
        if strict and np.any(s <= 0):
            raise DomainError("consumption formulas need t < T")
        return s

    @staticmethod
    def _psi2(psi):
        return psi[1] if len(psi) > 1 else -0.25 * psi[0] ** 2

    def rate(self, t, log_mean):
        s = self._s(t, strict=True)
        g = self.gamma
        return (1.0 + g) * s / (g * self.beta * np.exp(log_mean))

    # value function ----------------------------------------------------
    def value(self, theta, t, log_mean):
        th1, th2, th3, th4 = theta
        g, beta = self.gamma, self.beta
        t = np.asarray(t, dtype=float)
        e = self._e(t)
        s = 1.0 - e
        return (
            (1.0 + g) / beta * s * log_mean
            + th1 * e**2
            + th2 * e
            - (1.0 + g) / beta * _xlogx(s)
            + th3 * t * e
            + th4
        )

    def grad_value(self, theta, t, log_mean):
        t = np.asarray(t, dtype=float)
        e = self._e(t) + 0.0 * log_mean
        return np.stack(np.broadcast_arrays(e**2, e, t * e, np.ones_like(e)), axis=-1)

    # essential q-function ----------------------------------------------
    def qe(self, psi, t, x, log_mean, a, c):
        c = np.asarray(c, dtype=float)
        if np.any(c <= 0):
            raise DomainError("consumption must be positive")
        g, beta = self.gamma, self.beta
        s = self._s(t, strict=True)
        kappa = (1.0 + g) * s / (beta * np.exp(log_mean))
        return (
            -(1.0 + g) * log_mean
            + psi[0] * s * a
            - a**2
            + self._psi2(psi) * s**2
            - kappa * c
            + np.log(c)
            - self.K
            + (1.0 + g) * np.log(s)
        )

    def grad_qe(self, psi, t, x, log_mean, a, c):
        s = self._s(t, strict=True)
        d1 = s * a - 0.5 * psi[0] * s**2 + 0.0 * log_mean
        return np.asarray(d1)[..., None]

    def _test_a_moments(self, psi_tilde, s):
        pt = np.asarray(psi_tilde, dtype=float)
        m = 0.5 * pt[..., 0] * s
        return m, m**2 + 0.5 * self.gamma

    def expected_log_c(self, t, log_mean):
        return digamma(self.shape) - np.log(self.rate(t, log_mean))

    def expected_qe(self, psi, t, log_mean, psi_tilde):
        g = self.gamma
        s = self._s(t, strict=True)
        ea, ea2 = self._test_a_moments(psi_tilde, s)
        # kappa * E[c] = 1 + gamma exactly
        return (
            -(1.0 + g) * log_mean
            + psi[0] * s * ea
            - ea2
            + self._psi2(psi) * s**2
            - (1.0 + g)
            + self.expected_log_c(t, log_mean)
            - self.K
            + (1.0 + g) * np.log(s)
        )

    def expected_grad_qe(self, psi, t, log_mean, psi_tilde):
        s = self._s(t, strict=True)
        ea, _ = self._test_a_moments(psi_tilde, s)
        return np.asarray(s * ea - 0.5 * psi[0] * s**2 + 0.0 * log_mean)[..., None]

    def test_entropy(self, psi_tilde, t, log_mean):
        g = self.gamma
        rate = self.rate(t, log_mean)
        a_part = 0.5 * math.log(2.0 * math.pi * math.e * 0.5 * g)
        c_part = self.shape - np.log(rate) + gammaln(self.shape) + (1.0 - self.shape) * digamma(self.shape)
        return a_part + c_part + 0.0 * np.asarray(psi_tilde, dtype=float)[..., 0]

    def normalization_residual(self, psi, t, log_mean):
        g = self.gamma
        s = self._s(t, strict=True)
        kappa = (1.0 + g) * s / (self.beta * np.exp(log_mean))
        const = -(1.0 + g) * log_mean + self._psi2(psi) * s**2 - self.K + (1.0 + g) * np.log(s)
        a_norm = 0.5 * math.log(math.pi * g) + (psi[0] * s) ** 2 / (4.0 * g)
        c_norm = gammaln(self.shape) - self.shape * np.log(kappa / g)
        return const / g + a_norm + c_norm

    # policies ----------------------------------------------------------
    def policy(self, psi) -> ProductPolicy:
        p1 = float(psi[0])
        g, beta, T = self.gamma, self.beta, self.T

        def mean_fn(t, x, mu):
            return 0.5 * p1 * (1.0 - np.exp(-beta * (T - t))) + 0.0 * np.asarray(x)

        def rate_fn(t, mu):
            return (1.0 + g) * (1.0 - np.exp(-beta * (T - t))) / (g * beta * mu.mean)

        return ProductPolicy(GaussianPolicy(mean_fn, lambda t, mu: 0.5 * g), GammaPolicy(self.shape, rate_fn))

    def expected_reward(self, psi_tilde, t, log_mean):
        """``E[log c] - E[a^2]`` under ``h^{psi_tilde}``."""
        s = self._s(t, strict=True)
        ea, ea2 = self._test_a_moments(psi_tilde, s)
        return self.expected_log_c(t, log_mean) - ea2

    def moment_drift(self, psi_tilde, t, log_mean):
        s = self._s(t, strict=True)
        ea, _ = self._test_a_moments(psi_tilde, s)
        return (self.model.b * ea - self.beta / s + 0.0 * log_mean,)

    def average_action_mean(self, psi, t, log_mean):
        return 0.5 * psi[0] * self._s(t) + 0.0 * log_mean

    def enforce(self, psi):
        return np.asarray(psi, dtype=float)[:1]

    def true_params(self):
        m = self.model
        b, g, beta, T = m.b, m.gamma, m.beta, m.T
        c = b**2 * (1.0 + g) ** 2
        a1 = -c / (4.0 * beta**3)
        a2 = (1.0 + g) * T - c * T / (2.0 * beta**2) - self.K / beta
        a4 = -(1.0 + g) + c / (2.0 * beta**2)
        a5 = c / (4.0 * beta**3) + self.K / beta
        return np.array([a1, a2, a4, a5]), np.array([b * (1.0 + g) / beta])

    def improve(self, psi):
        """Gibbs improvement of ``pi^psi``; the value's ``log mean`` loading is policy-free."""
        m = self.model
        return np.array([m.b * (1.0 + m.gamma) / m.beta])

    def policy_qe_action_part(self, psi, t, x, log_mean, a, c):
        m = self.model
        g = m.gamma
        B = (1.0 + g) / m.beta * self._s(t)
        mean = np.exp(log_mean)
        p = B / mean
        return (m.b * mean * a - c) * p + np.log(c) - a**2


def family_for(model: ModelSpec):
    if model.kind == MEAN_VARIANCE:
        return MeanVarianceFamily(model)
    return ConsumptionFamily(model)


def state_args(state):
    """Moment arrays of a state, in the order the family methods expect."""
    if isinstance(state, MeanVarianceState):
        return (state.mean, state.var)
    if isinstance(state, LogMeanState):
        return (state.log_mean,)
    raise TypeError(f"unsupported state {type(state).__name__}")


# ---------------------------------------------------------------------
# Named parameter containers and the module-level API
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class ValueParams:
    kind: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = 3 if self.kind == MEAN_VARIANCE else 4
        v = np.asarray(self.values, dtype=float)
        if v.shape != (n,):
            raise ValueError(f"{self.kind} value parameters need {n} entries")
        if not np.all(np.isfinite(v)):
            raise ValueError("value parameters must be finite")
        if self.kind == MEAN_VARIANCE and v[2] == 0:
            raise DomainError("theta3 must be nonzero")
        object.__setattr__(self, "values", v)

    def to_dict(self):
        return {f"theta{i + 1}": float(v) for i, v in enumerate(self.values)}

    @classmethod
    def from_dict(cls, kind, d):
        n = 3 if kind == MEAN_VARIANCE else 4
        return cls(kind, np.array([d[f"theta{i + 1}"] for i in range(n)], dtype=float))


@dataclass(frozen=True)
class QParams:
    """Free q-parameters: ``psi1..psi4`` (``psi5 = 0``) or ``psi1`` alone."""

    kind: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = 4 if self.kind == MEAN_VARIANCE else 1
        v = np.asarray(self.values, dtype=float)
        if v.shape != (n,):
            raise ValueError(f"{self.kind} q-parameters need {n} free entries")
        if not np.all(np.isfinite(v)):
            raise ValueError("q-parameters must be finite")
        object.__setattr__(self, "values", v)

    @property
    def psi2(self):
        return self.values[1] if self.kind == MEAN_VARIANCE else -0.25 * self.values[0] ** 2

    @property
    def psi5(self):
        return 0.0

    def to_dict(self):
        return {f"psi{i + 1}": float(v) for i, v in enumerate(self.values)}

    @classmethod
    def from_dict(cls, kind, d):
        n = 4 if kind == MEAN_VARIANCE else 1
        return cls(kind, np.array([d[f"psi{i + 1}"] for i in range(n)], dtype=float))


def value_J(model: ModelSpec, theta: ValueParams, t, mu):
    return family_for(model).value(theta.values, t, *state_args(mu))


def grad_value_theta(model: ModelSpec, theta: ValueParams, t, mu):
    return family_for(model).grad_value(theta.values, t, *state_args(mu))


def qe(model: ModelSpec, psi: QParams, t, x, mu, action):
    fam = family_for(model)
    if model.kind == MEAN_VARIANCE:
        return fam.qe(psi.values, t, x, *state_args(mu), action)
    a, c = action
    return fam.qe(psi.values, t, x, *state_args(mu), a, c)


def grad_qe_psi(model: ModelSpec, psi: QParams, t, x, mu, action):
    fam = family_for(model)
    if model.kind == MEAN_VARIANCE:
        return fam.grad_qe(psi.values, t, x, *state_args(mu), action)
    a, c = action
    return fam.grad_qe(psi.values, t, x, *state_args(mu), a, c)


def policy_from_psi(model: ModelSpec, psi: QParams):
    return family_for(model).policy(psi.values)


def integrated_q(model: ModelSpec, psi: QParams, t, mu, psi_tilde):
    """``E_{mu,h}[q_e^psi] + gamma E_mu[entropy(h)]`` for ``h = h^{psi_tilde}``."""
    fam = family_for(model)
    pt = psi_tilde.values if isinstance(psi_tilde, QParams) else np.asarray(psi_tilde, dtype=float)
    args = state_args(mu)
    return fam.expected_qe(psi.values, t, *args, pt) + model.gamma * fam.test_entropy(pt, t, *args)


def normalization_residual(model: ModelSpec, psi: QParams, t, mu):
    return family_for(model).normalization_residual(psi.values, t, *state_args(mu))


def true_params(model: ModelSpec):
    theta, psi = family_for(model).true_params()
    return ValueParams(model.kind, theta), QParams(model.kind, psi)
