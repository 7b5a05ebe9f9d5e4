"""Environment simulators ``(mu', r_hat) = Env_dt(t, mu, h)``.

The moment recursions are exact Euler discretizations of the mean-field
moment ODEs under a test policy ``h^{psi_tilde}``. The particle simulator is
a plain Euler-Maruyama scheme for ``N`` interacting particles and serves as
an independent oracle for the recursions.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import digamma

from .models import (
    CONSUMPTION,
    MEAN_VARIANCE,
    DomainError,
    LogMeanState,
    MeanVarianceState,
    ModelSpec,
)
from .policies import sample

log = logging.getLogger(__name__)

REWARD_VARIANTS = ("exact", "printed")


def _check_dt(dt):
    if not (np.isfinite(dt) and dt > 0):
        raise ValueError(f"dt must be positive, got {dt}")


def _check_params(psi_tilde):
    pt = np.asarray(psi_tilde, dtype=float)
    if not np.all(np.isfinite(pt)):
        raise ValueError("test-policy parameters must be finite")
    return pt


# ---------------------------------------------------------------------
# array kernels (batched over trailing axes)
# ---------------------------------------------------------------------


def mv_step_arrays(model: ModelSpec, t, mean, var, psi_tilde, dt):
    pt = np.asarray(psi_tilde, dtype=float)
    q1, q2, q3, q4 = pt[..., 0], pt[..., 1], pt[..., 2], pt[..., 3]
    b, s2, g = model.b, model.sigma**2, model.gamma
    tau = t - model.T
    shift = q4 * np.exp(-q2 * tau)
    new_mean = mean - b * shift * dt
    new_var = var + ((s2 * q3**2 - 2.0 * b * q3) * var + s2 * shift**2 + g * s2 * np.exp(-q1 - q2 * tau)) * dt
    if np.any(new_var < 0):
        log.warning("variance undershoot at t=%.4g clamped to 0", t)
        new_var = np.maximum(new_var, 0.0)
    return new_mean, new_var


def consumption_step_arrays(model: ModelSpec, t, log_mean, psi1_tilde, dt, reward_variant="exact"):
    if reward_variant not in REWARD_VARIANTS:
        raise ValueError(f"reward_variant must be one of {REWARD_VARIANTS}")
    if not t < model.T:
        raise DomainError(f"consumption step needs t < T, got t={t}")
    g, beta, b = model.gamma, model.beta, model.b
    s = 1.0 - math.exp(-beta * (model.T - t))
    pt = np.asarray(psi1_tilde, dtype=float)
    new_log_mean = log_mean + (0.5 * pt * b * s - beta / s) * dt
    base = digamma(1.0 + 1.0 / g) - math.log((1.0 + g) / (g * beta) * s) + log_mean
    if reward_variant == "exact":
        # E[log c] - E[a^2] with E[a^2] = mean^2 + gamma/2
        reward = base - 0.25 * (pt * s) ** 2 - 0.5 * g
    else:
        reward = base + 0.25 * (pt * s) ** 2 + 0.25 * g**2
    return new_log_mean, reward


# ---------------------------------------------------------------------
# single-step operations on states
# ---------------------------------------------------------------------


def mv_moment_step(model: ModelSpec, t, mu: MeanVarianceState, psi_tilde, dt):
    """One Euler step of the mean-variance moment recursion; interior reward is 0."""
    if model.kind != MEAN_VARIANCE:
        raise ValueError("mv_moment_step needs a mean-variance model")
    _check_dt(dt)
    pt = _check_params(psi_tilde)
    mean, var = mv_step_arrays(model, t, mu.mean, mu.var, pt, dt)
    return MeanVarianceState(mean, var), 0.0


def consumption_logmean_step(model: ModelSpec, t, mu: LogMeanState, psi1_tilde, dt, reward_variant="exact"):
    """One Euler step of ``log mean`` and the aggregated reward at ``t``."""
    if model.kind != CONSUMPTION:
        raise ValueError("consumption_logmean_step needs a consumption model")
    _check_dt(dt)
    pt = _check_params(psi1_tilde)
    lm, r = consumption_step_arrays(model, t, mu.log_mean, pt, dt, reward_variant)
    return LogMeanState(lm), r


# ---------------------------------------------------------------------
# particle oracle
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class ParticleCloud:
    positions: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.positions, dtype=float)
        if x.ndim != 1 or x.size < 2:
            raise ValueError("a particle cloud needs at least two particles")
        if not np.all(np.isfinite(x)):
            raise ValueError("particle positions must be finite")
        object.__setattr__(self, "positions", x)

    @property
    def mean(self):
        return float(self.positions.mean())

    @property
    def var(self):
        return float(self.positions.var())

    @property
    def state(self) -> MeanVarianceState:
        return MeanVarianceState(self.mean, self.var)

    @classmethod
    def gaussian(cls, mean, var, n, rng):
        return cls(rng.normal(mean, math.sqrt(var), size=n))


def particle_rng(seed: int, episode: int = 0, policy_index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, episode, policy_index])


def _particle_step(model, cloud, t, policy, dt, rng):
    x = cloud.positions
    mu = cloud.state
    action = sample(policy, t, x, mu, rng, size=x.size)
    drift = model.drift(t, x, mu, action)
    vol = model.volatility(t, x, mu, action)
    z = rng.standard_normal(x.size)
    reward = float(np.mean(model.running_reward(t, x, mu, action)))
    return ParticleCloud(x + drift * dt + vol * math.sqrt(dt) * z), reward


def particle_step(model: ModelSpec, cloud: ParticleCloud, t, policy, dt, rng) -> ParticleCloud:
    """Euler-Maruyama step with per-particle actions and the empirical law."""
    _check_dt(dt)
    return _particle_step(model, cloud, t, policy, dt, rng)[0]


# ---------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    states: List
    rewards: np.ndarray
    terminal: float
    dt: float = field(default=0.0)

    def __post_init__(self):
        K = len(self.rewards)
        if len(self.times) != K + 1 or len(self.states) != K + 1:
            raise ValueError("trajectory needs K+1 times and states for K rewards")
        if K and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    @property
    def K(self):
        return len(self.rewards)

    def to_csv(self, path):
        log_mean = isinstance(self.states[0], LogMeanState)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "t", "log_mean" if log_mean else "mean", "variance", "reward"])
            for k, (t, st) in enumerate(zip(self.times, self.states)):
                r = self.rewards[k] if k < self.K else self.terminal
                if log_mean:
                    w.writerow([k, repr(float(t)), repr(float(st.log_mean)), "", repr(float(r))])
                else:
                    w.writerow([k, repr(float(t)), repr(float(st.mean)), repr(float(st.var)), repr(float(r))])


def _grid(model, K, dt, t0):
    if K < 0:
        raise ValueError("K must be nonnegative")
    _check_dt(dt)
    end = t0 + K * dt
    if end > model.T + 1e-9:
        raise ValueError(f"t0 + K*dt = {end} exceeds T = {model.T}")
    return t0 + dt * np.arange(K + 1)


def rollout(model: ModelSpec, simulator_kind: str, mu0, psi_tilde, K: int, dt: float, *,
            t0: float = 0.0, rng: Optional[np.random.Generator] = None,
            n_particles: int = 100_000, reward_variant: str = "exact",
            initial_spread: float = 0.0) -> Trajectory:
    """Apply ``h^{psi_tilde}`` for ``K`` steps from ``mu0`` at ``t0``.

    ``simulator_kind`` is ``"moment"`` or ``"particle"``. The terminal slot
    holds ``g_hat`` of the final state. A particle cloud for a log-mean state
    starts at ``exp(log_mean)`` with standard deviation ``initial_spread``.
    """
    times = _grid(model, K, dt, t0)
    pt = _check_params(psi_tilde)
    if simulator_kind == "moment":
        states, rewards = [mu0], []
        mu = mu0
        for t in times[:-1]:
            if model.kind == MEAN_VARIANCE:
                mu, r = mv_moment_step(model, t, mu, pt, dt)
            else:
                mu, r = consumption_logmean_step(model, t, mu, pt[0], dt, reward_variant)
            states.append(mu)
            rewards.append(float(r))
    elif simulator_kind == "particle":
        from .params import family_for

        if rng is None:
            raise ValueError("the particle simulator needs an explicit rng")
        policy = family_for(model).policy(pt)
        if model.kind == MEAN_VARIANCE:
            cloud = ParticleCloud.gaussian(mu0.mean, mu0.var, n_particles, rng)
        else:
            cloud = ParticleCloud.gaussian(mu0.mean, initial_spread**2, n_particles, rng)
        states, rewards = [mu0], []
        for t in times[:-1]:
            cloud, r = _particle_step(model, cloud, t, policy, dt, rng)
            if model.kind == MEAN_VARIANCE:
                states.append(cloud.state)
            else:
                if cloud.mean <= 0:
                    raise DomainError("empirical mean left (0, inf); log-mean undefined")
                states.append(LogMeanState(math.log(cloud.mean)))
            rewards.append(r)
    else:
        raise ValueError(f"unknown simulator kind {simulator_kind!r}")
    terminal = float(model.terminal_payoff(states[-1]))
    return Trajectory(times, states, np.asarray(rewards, dtype=float), terminal, dt)


def moment_rollout_batch(model: ModelSpec, mu0, psi_tilde, K: int, dt: float, reward_variant="exact"):
    """Vectorized moment rollout for a batch of test parameters ``(M, p)``.

    Returns ``(times, stats, rewards, terminal)`` where ``stats`` is a tuple
    of ``(K+1, M)`` moment arrays in family order, ``rewards`` is ``(K, M)``
    and ``terminal`` is ``(M,)``.
    """
    times = _grid(model, K, dt, 0.0)
    pt = _check_params(psi_tilde)
    M = pt.shape[0]
    rewards = np.zeros((K, M))
    if model.kind == MEAN_VARIANCE:
        mean = np.empty((K + 1, M))
        var = np.empty((K + 1, M))
        mean[0], var[0] = mu0.mean, mu0.var
        for k in range(K):
            mean[k + 1], var[k + 1] = mv_step_arrays(model, times[k], mean[k], var[k], pt, dt)
        terminal = mean[K] - model.lam * var[K]
        return times, (mean, var), rewards, terminal
    lm = np.empty((K + 1, M))
    lm[0] = mu0.log_mean
    for k in range(K):
        lm[k + 1], rewards[k] = consumption_step_arrays(model, times[k], lm[k], pt[:, 0], dt, reward_variant)
    return times, (lm,), rewards, np.zeros(M)
