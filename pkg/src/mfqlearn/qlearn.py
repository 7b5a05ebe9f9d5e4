"""Offline and online q-learning for the parametric mean-field families.

Offline learning rolls out ``M`` test policies per episode, forms the
martingale returns ``G_{t_k:T}`` and descends their squared sum. Online
learning advances ``M`` state tracks step by step and descends the squared
temporal-difference residual after every step.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .models import MEAN_VARIANCE, ModelSpec
from .params import family_for
from .simulators import consumption_step_arrays, moment_rollout_batch, mv_step_arrays

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """Raised when a parameter leaves ``[-1e6, 1e6]``; carries the partial history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseSchedule:
    """Piecewise-constant rates: ``breakpoints = [(j_from, rates), ...]``."""

    breakpoints: Tuple

    def __post_init__(self):
        bps = tuple((int(j), np.atleast_1d(np.asarray(r, dtype=float))) for j, r in self.breakpoints)
        if not bps:
            raise ValueError("a schedule needs at least one breakpoint")
        js = [j for j, _ in bps]
        if js != sorted(js) or len(set(js)) != len(js):
            raise ValueError("schedule breakpoints must be strictly increasing")
        if any(np.any(r < 0) or not np.all(np.isfinite(r)) for _, r in bps):
            raise ValueError("learning rates must be finite and nonnegative")
        object.__setattr__(self, "breakpoints", bps)

    def __call__(self, j: int) -> np.ndarray:
        out = np.zeros_like(self.breakpoints[0][1])
        for j_from, rates in self.breakpoints:
            if j >= j_from:
                out = rates
        return out

    def scaled(self, factor: float) -> "PiecewiseSchedule":
        return PiecewiseSchedule(tuple((j, r * factor) for j, r in self.breakpoints))


@dataclass(frozen=True)
class PowerBounds:
    """Sampling box ``[p_i(j), q_i(j)]`` with ``p_i = lo_i / j**lo_pow_i`` and likewise ``q_i``."""

    lo: Tuple[float, ...]
    lo_pow: Tuple[float, ...]
    hi: Tuple[float, ...]
    hi_pow: Tuple[float, ...]

    def __post_init__(self):
        n = len(self.lo)
        if not (len(self.lo_pow) == len(self.hi) == len(self.hi_pow) == n):
            raise ValueError("bound coefficient lists must have equal length")
        for name in ("lo", "lo_pow", "hi", "hi_pow"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def __call__(self, j: int):
        j = max(int(j), 1)
        p = np.array([c / j**e for c, e in zip(self.lo, self.lo_pow)])
        q = np.array([c / j**e for c, e in zip(self.hi, self.hi_pow)])
        if np.any(p > q):
            raise ValueError(f"empty sampling interval at j={j}")
        return p, q

    @classmethod
    def constant(cls, lo, hi):
        n = len(lo)
        return cls(tuple(lo), (0.0,) * n, tuple(hi), (0.0,) * n)


# ---------------------------------------------------------------------
# configuration and history
# ---------------------------------------------------------------------


@dataclass
class LearningConfig:
    dt: float
    K: int
    N: int
    M: int
    theta0: np.ndarray
    psi0: np.ndarray
    rate_theta: PiecewiseSchedule
    rate_psi: PiecewiseSchedule
    bounds: PowerBounds
    initial_state: object
    seed: int = 0
    reward_variant: str = "exact"
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    track_l1: bool = True

    def validate(self, model: ModelSpec):
        if not (self.dt > 0 and self.K >= 0 and self.N >= 0 and self.M >= 1):
            raise ValueError("need dt > 0, K >= 0, N >= 0 and M >= 1")
        if self.K > 0 and abs(self.K * self.dt - model.T) > 1e-9 * max(1.0, model.T):
            raise ValueError(f"K*dt = {self.K * self.dt} must equal T = {model.T}")
        fam = family_for(model)
        if len(self.theta0) != len(fam.theta_names) or len(self.psi0) != len(fam.psi_names):
            raise ValueError("initial parameter vectors have the wrong length")
        if len(self.bounds.lo) != len(fam.psi_names):
            raise ValueError("sampling bounds need one entry per free psi coordinate")


@dataclass
class EpisodeRecord:
    episode: int
    theta: np.ndarray
    psi: np.ndarray
    loss: float
    l1_error: float


@dataclass
class LearningHistory:
    theta_names: Sequence[str]
    psi_names: Sequence[str]
    records: List[EpisodeRecord] = field(default_factory=list)
    theta: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.records)

    @property
    def columns(self):
        return ["episode", *self.theta_names, *self.psi_names, "loss", "l1_error"]

    def rows(self):
        for r in self.records:
            yield [r.episode, *r.theta.tolist(), *r.psi.tolist(), r.loss, r.l1_error]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows():
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def _mean_rows(a: np.ndarray) -> np.ndarray:
    # compensated summation so the average does not depend on policy order
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        return np.full(a.shape[1], np.nan)
    return np.array([math.fsum(col) for col in a.T]) / a.shape[0]


# ---------------------------------------------------------------------
# test-policy sampling
# ---------------------------------------------------------------------


def sample_test_params(psi, j: int, bounds: PowerBounds, rng: np.random.Generator, size: Optional[int] = None):
    """``psi * u`` with ``u_i ~ U[p_i(j), q_i(j)]``; one row per test policy when ``size`` is given."""
    p, q = bounds(j)
    psi = np.asarray(psi, dtype=float)
    shape = psi.shape if size is None else (size, psi.size)
    return psi * rng.uniform(p, q, size=shape)


# ---------------------------------------------------------------------
# offline returns
# ---------------------------------------------------------------------


def _value_and_grad(fam, theta, times, stats):
    t = times[:, None]
    return fam.value(theta, t, *stats), fam.grad_value(theta, t, *stats)


def offline_returns_batch(model: ModelSpec, theta, psi, times, stats, rewards, terminal, psi_tilde, dt):
    """Martingale returns and gradients for ``M`` trajectories at once.

    ``stats`` holds ``(K+1, M)`` moment arrays, ``rewards`` is ``(K, M)``,
    ``terminal`` is ``(M,)`` and ``psi_tilde`` is ``(M, p)``. Returns
    ``G`` of shape ``(K, M)`` and per-policy ``dtheta``, ``dpsi``.
    """
    fam = family_for(model)
    K = rewards.shape[0]
    M = rewards.shape[1]
    if K == 0:
        return np.zeros((0, M)), np.zeros((M, len(theta))), np.zeros((M, len(psi)))
    tk = times[:K, None]
    st = tuple(s[:K] for s in stats)
    pt = np.asarray(psi_tilde, dtype=float)[None, :, :]
    J, dJ = _value_and_grad(fam, theta, times[:K], st)
    eq = fam.expected_qe(psi, tk, *st, pt)
    deq = fam.expected_grad_qe(psi, tk, *st, pt)
    disc = math.exp(-model.beta * dt)
    d = (rewards - eq) * dt

    # suffix sums S_k = sum_{i>=k} e^{-beta (t_i - t_k)} d_i
    S = np.empty_like(d)
    acc = np.zeros(M)
    for k in range(K - 1, -1, -1):
        acc = d[k] + disc * acc
        S[k] = acc
    G = np.exp(-model.beta * (model.T - tk)) * terminal[None, :] - J + S

    # prefix sums P_i = sum_{k<=i} e^{-beta (t_i - t_k)} G_k
    P = np.empty_like(G)
    acc = np.zeros(M)
    for i in range(K):
        acc = G[i] + disc * acc
        P[i] = acc
    dtheta = -np.einsum("km,kmp->mp", G, dJ) * dt
    dpsi = -np.einsum("km,kmp->mp", P, deq) * dt**2
    return G, dtheta, dpsi


def _trajectory_arrays(model, traj):
    if model.kind == MEAN_VARIANCE:
        stats = (
            np.array([s.mean for s in traj.states], dtype=float)[:, None],
            np.array([s.var for s in traj.states], dtype=float)[:, None],
        )
    else:
        stats = (np.array([s.log_mean for s in traj.states], dtype=float)[:, None],)
    return stats, np.asarray(traj.rewards, dtype=float)[:, None], np.array([traj.terminal])


def offline_returns(model: ModelSpec, theta, psi, trajectory, psi_tilde, dt):
    """``(G, dtheta, dpsi)`` for one trajectory generated by ``h^{psi_tilde}``."""
    stats, rewards, terminal = _trajectory_arrays(model, trajectory)
    G, dth, dps = offline_returns_batch(
        model, np.asarray(theta, dtype=float), np.asarray(psi, dtype=float), np.asarray(trajectory.times),
        stats, rewards, terminal, np.atleast_2d(psi_tilde), dt,
    )
    return G[:, 0], dth[0], dps[0]


# ---------------------------------------------------------------------
# online deltas
# ---------------------------------------------------------------------


def online_deltas(model: ModelSpec, theta, psi, t, mu_k, mu_next, reward, psi_tilde, dt, terminal=False):
    """TD residual and gradients for one step.

    ``mu_k``/``mu_next`` are tuples of moment arrays (family order). With
    ``terminal=True`` the next value is the terminal payoff, which does not
    depend on ``theta``.
    """
    fam = family_for(model)
    theta = np.asarray(theta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    pt = np.asarray(psi_tilde, dtype=float)
    J_k = fam.value(theta, t, *mu_k)
    dJ_k = fam.grad_value(theta, t, *mu_k)
    if terminal:
        J_next = _terminal_from_stats(model, mu_next)
        dJ_next = np.zeros_like(dJ_k)
    else:
        J_next = fam.value(theta, t + dt, *mu_next)
        dJ_next = fam.grad_value(theta, t + dt, *mu_next)
    eq = fam.expected_qe(psi, t, *mu_k, pt)
    deq = fam.expected_grad_qe(psi, t, *mu_k, pt)
    beta = model.beta
    delta = J_next - J_k + (reward - beta * J_k - eq) * dt
    d = np.asarray(delta)[..., None]
    dtheta = d * (dJ_next - dJ_k - beta * dJ_k * dt)
    dpsi = -d * deq * dt
    return delta, dtheta, dpsi


def _terminal_from_stats(model, stats):
    if model.kind == MEAN_VARIANCE:
        mean, var = stats
        return mean - model.lam * var
    return np.zeros_like(np.asarray(stats[0], dtype=float))


# ---------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------


def _guard(theta, psi, j, history):
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(psi))) or max(
        np.max(np.abs(theta)), np.max(np.abs(psi))
    ) > DIVERGENCE_LIMIT:
        history.theta, history.psi = theta, psi
        raise DivergenceError(f"parameters diverged at episode {j}: theta={theta}, psi={psi}", history)


def _checkpoint(config, fam, j, theta, psi):
    if config.checkpoint_every and config.checkpoint_dir and j % config.checkpoint_every == 0:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
        payload = {
            "episode": j,
            "theta": dict(zip(fam.theta_names, map(float, theta))),
            "psi": dict(zip(fam.psi_names, map(float, psi))),
        }
        with open(os.path.join(config.checkpoint_dir, f"checkpoint_{j:06d}.json"), "w") as fh:
            json.dump(payload, fh, indent=2)


def _l1(model, config, psi, psi_star, cache):
    if not config.track_l1:
        return float("nan")
    from .diagnostics import l1_policy_error

    return l1_policy_error(psi, model, config.K, config.dt, config.initial_state, psi_star=psi_star, cache=cache)


def run_offline(config: LearningConfig, model: ModelSpec, simulator: str = "moment") -> LearningHistory:
    """Offline q-learning over ``config.N`` episodes with the moment simulator."""
    if simulator != "moment":
        raise ValueError("learning runs use the deterministic moment simulator")
    config.validate(model)
    fam = family_for(model)
    rng = np.random.default_rng(config.seed)
    theta = np.array(config.theta0, dtype=float)
    psi = fam.enforce(np.array(config.psi0, dtype=float))
    history = LearningHistory(fam.theta_names, fam.psi_names)
    psi_star = fam.true_params()[1]
    cache = {}
    for j in range(1, config.N + 1):
        pt = sample_test_params(psi, j, config.bounds, rng, size=config.M)
        times, stats, rewards, terminal = moment_rollout_batch(
            model, config.initial_state, pt, config.K, config.dt, config.reward_variant
        )
        G, dth, dps = offline_returns_batch(model, theta, psi, times, stats, rewards, terminal, pt, config.dt)
        with np.errstate(over="ignore", invalid="ignore"):
            loss = float(np.sum(G**2) * config.dt / (2.0 * config.M))
        theta = theta - config.rate_theta(j) * _mean_rows(dth)
        psi = fam.enforce(psi - config.rate_psi(j) * _mean_rows(dps))
        _guard(theta, psi, j, history)
        history.records.append(EpisodeRecord(j, theta.copy(), psi.copy(), loss, _l1(model, config, psi, psi_star, cache)))
        _checkpoint(config, fam, j, theta, psi)
    history.theta, history.psi = theta, psi
    return history


def run_online(config: LearningConfig, model: ModelSpec, simulator: str = "moment") -> LearningHistory:
    """Online q-learning: fresh test policies and a parameter update at every step.

    The recorded loss of an episode is ``(1/2M) sum_m sum_k delta_k^2 / dt``,
    the step-wise analogue of the martingale loss.
    """
    if simulator != "moment":
        raise ValueError("learning runs use the deterministic moment simulator")
    config.validate(model)
    fam = family_for(model)
    rng = np.random.default_rng(config.seed)
    theta = np.array(config.theta0, dtype=float)
    psi = fam.enforce(np.array(config.psi0, dtype=float))
    history = LearningHistory(fam.theta_names, fam.psi_names)
    psi_star = fam.true_params()[1]
    cache = {}
    M, K, dt = config.M, config.K, config.dt
    mu0 = config.initial_state
    for j in range(1, config.N + 1):
        if model.kind == MEAN_VARIANCE:
            stats = (np.full(M, float(mu0.mean)), np.full(M, float(mu0.var)))
        else:
            stats = (np.full(M, float(mu0.log_mean)),)
        a_th, a_ps = config.rate_theta(j), config.rate_psi(j)
        sq = 0.0
        for k in range(K):
            t = k * dt
            pt = sample_test_params(psi, j, config.bounds, rng, size=M)
            if model.kind == MEAN_VARIANCE:
                nxt = mv_step_arrays(model, t, stats[0], stats[1], pt, dt)
                reward = np.zeros(M)
            else:
                lm, reward = consumption_step_arrays(model, t, stats[0], pt[:, 0], dt, config.reward_variant)
                nxt = (lm,)
            delta, dth, dps = online_deltas(model, theta, psi, t, stats, nxt, reward, pt, dt, terminal=(k == K - 1))
            d2 = np.asarray(delta) ** 2
            sq = sq + (math.fsum(d2) if np.all(np.isfinite(d2)) else math.inf)
            theta = theta - a_th * _mean_rows(dth)
            psi = fam.enforce(psi - a_ps * _mean_rows(dps))
            _guard(theta, psi, j, history)
            stats = nxt
        loss = sq / (2.0 * M * dt) if K else 0.0
        history.records.append(EpisodeRecord(j, theta.copy(), psi.copy(), loss, _l1(model, config, psi, psi_star, cache)))
        _checkpoint(config, fam, j, theta, psi)
    history.theta, history.psi = theta, psi
    return history
