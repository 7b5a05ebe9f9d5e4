"""Diagnostics: martingale loss, L1 policy error, the first-order q relation
and policy-improvement monotonicity.

The L1 policy error is a chart convention: the time-integrated absolute gap
between the population-averaged action means of ``pi^psi`` and ``pi^{psi*}``,
each evaluated along its own moment trajectory from ``mu0``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .models import MEAN_VARIANCE, DomainError, ModelSpec
from .params import family_for, state_args
from .policies import gibbs_improve
from .qlearn import offline_returns_batch
from .simulators import moment_rollout_batch


@dataclass
class LossReport:
    martingale_loss: float
    residuals: List[float]
    l1_error: Optional[float] = None

    def to_dict(self):
        return asdict(self)


def martingale_loss(theta, psi, test_set, model: ModelSpec, dt: float, K: int, mu0,
                    simulator: str = "moment", reward_variant: str = "exact",
                    psi_star=None) -> LossReport:
    """``(1/2M) sum_m sum_k G_{t_k:T}^2 dt`` over the test policies in ``test_set``."""
    if simulator != "moment":
        raise ValueError("martingale_loss uses the deterministic moment simulator")
    pt = np.atleast_2d(np.asarray(test_set, dtype=float))
    if pt.size == 0 or pt.shape[0] == 0:
        raise ValueError("test_set must contain at least one test policy")
    theta = np.asarray(theta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    times, stats, rewards, terminal = moment_rollout_batch(model, mu0, pt, K, dt, reward_variant)
    G, _, _ = offline_returns_batch(model, theta, psi, times, stats, rewards, terminal, pt, dt)
    per = 0.5 * np.sum(G**2, axis=0) * dt
    loss = math.fsum(per) / pt.shape[0]
    l1 = None
    if psi_star is not None:
        l1 = l1_policy_error(psi, model, K, dt, mu0, psi_star=psi_star)
    return LossReport(loss, per.tolist(), l1)


def _average_means(model, psi, K, dt, mu0):
    fam = family_for(model)
    times, stats, _, _ = moment_rollout_batch(model, mu0, np.atleast_2d(psi), K, dt)
    return fam.average_action_mean(np.asarray(psi, dtype=float), times[:K, None], *(s[:K] for s in stats))[:, 0]


def l1_policy_error(psi, model: ModelSpec, K: int, dt: float, mu0, psi_star=None, cache=None) -> float:
    """``sum_k |mean(pi^psi) - mean(pi^{psi*})| dt`` along each policy's own trajectory."""
    if psi_star is None:
        psi_star = family_for(model).true_params()[1]
    key = (tuple(np.asarray(psi_star, dtype=float)), K, dt)
    if cache is not None and key in cache:
        ref = cache[key]
    else:
        ref = _average_means(model, psi_star, K, dt, mu0)
        if cache is not None:
            cache[key] = ref
    cur = _average_means(model, psi, K, dt, mu0)
    return float(math.fsum(np.abs(cur - ref)) * dt)


# ---------------------------------------------------------------------
# first-order relation Q_dt = J + q dt + o(dt)
# ---------------------------------------------------------------------


def _q_dt(model, theta, t, stats0, psi_tilde, dt, rtol=1e-12, atol=1e-14):
    """Value of applying ``h`` on ``[t, t+dt)`` and following ``J^theta`` afterwards."""
    fam = family_for(model)
    g, beta = model.gamma, model.beta
    n = len(stats0)

    def rhs(s, y):
        st = tuple(y[:n])
        drift = fam.moment_drift(psi_tilde, s, *st)
        run = fam.expected_reward(psi_tilde, s, *st) + g * fam.test_entropy(psi_tilde, s, *st)
        return [*(float(d) for d in drift), math.exp(-beta * (s - t)) * float(run)]

    sol = solve_ivp(rhs, (t, t + dt), [*map(float, stats0), 0.0], method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"moment ODE integration failed: {sol.message}")
    y = sol.y[:, -1]
    return y[n] + math.exp(-beta * dt) * float(fam.value(theta, t + dt, *y[:n]))


def first_order_check(model: ModelSpec, theta, psi, t, mu, psi_tilde, dt_list: Sequence[float]):
    """Residuals ``|Q_dt - J - q dt|`` for each ``dt``; ``o(dt)`` when ``(theta, psi)`` are exact."""
    fam = family_for(model)
    theta = np.asarray(theta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    pt = np.asarray(psi_tilde, dtype=float)
    stats0 = tuple(float(v) for v in state_args(mu))
    J = float(fam.value(theta, t, *stats0))
    q = float(fam.expected_qe(psi, t, *stats0, pt) + model.gamma * fam.test_entropy(pt, t, *stats0))
    out = []
    for dt in dt_list:
        if dt < 0 or t + dt > model.T:
            raise ValueError(f"need 0 <= dt and t + dt <= T, got dt={dt}")
        if dt == 0:
            out.append(0.0)
            continue
        out.append(abs(_q_dt(model, theta, t, stats0, pt, dt) - J - q * dt))
    return out


# ---------------------------------------------------------------------
# policy improvement
# ---------------------------------------------------------------------


def policy_value(model: ModelSpec, psi, mu0, dt: float = 1e-3) -> float:
    """Entropy-regularized value of ``pi^psi`` from ``(0, mu0)`` by a fine moment rollout."""
    fam = family_for(model)
    K = int(round(model.T / dt))
    pt = np.atleast_2d(np.asarray(psi, dtype=float))
    times, stats, rewards, terminal = moment_rollout_batch(model, mu0, pt, K, dt)
    tk = times[:K, None]
    ent = fam.test_entropy(pt[None], tk, *(s[:K] for s in stats))
    run = (rewards + model.gamma * ent)[:, 0]
    disc = np.exp(-model.beta * times[:K])
    return float(math.fsum(disc * run) * dt + math.exp(-model.beta * model.T) * terminal[0])


def _check_gibbs(model, fam, psi, psi_new, mu0, tol=1e-8):
    # pointwise Gibbs policy of q_e(.; pi^psi) must equal pi^{psi_new}
    g = model.gamma
    policy = fam.policy(psi_new)
    stats = state_args(mu0)
    for t in (0.0, 0.5 * model.T):
        if model.kind == MEAN_VARIANCE:
            mu = mu0
            for x in (mu0.mean - 1.0, mu0.mean + 0.5):
                got = gibbs_improve(lambda a: fam.policy_qe_action_part(psi, t, x, *stats, a), "gaussian", g)
                want_m, want_v = policy.mean(t, x, mu), policy.var(t, mu)
                if abs(got.mean(t, x, mu) - want_m) > tol or abs(got.var(t, mu) - want_v) > tol * max(1.0, want_v):
                    raise AssertionError("closed-form improvement disagrees with the Gibbs map")
        else:
            x = mu0.mean
            got = gibbs_improve(lambda a, c: fam.policy_qe_action_part(psi, t, x, *stats, a, c), "product", g)
            inv, cons = policy.investment, policy.consumption
            if abs(got.investment.mean(t, x, mu0) - inv.mean(t, x, mu0)) > tol:
                raise AssertionError("closed-form improvement disagrees with the Gibbs map")
            r_got, r_want = got.consumption.rate(t, mu0), cons.rate(t, mu0)
            if abs(r_got - r_want) > tol * r_want or abs(got.consumption.shape - cons.shape) > tol:
                raise AssertionError("closed-form improvement disagrees with the Gibbs map")


@dataclass
class ImprovementResult:
    monotone: bool
    values: List[float]
    params: List[List[float]] = field(default_factory=list)


def policy_improvement_check(psi_a, model: ModelSpec, n_iters: int, mu0, dt: float = 1e-3,
                             tol: float = 1e-3, verify_gibbs: bool = True) -> ImprovementResult:
    """Values of ``pi, I(pi), I^2(pi), ...`` and whether they are nondecreasing within ``tol``."""
    if n_iters < 0:
        raise ValueError("n_iters must be nonnegative")
    fam = family_for(model)
    psi = fam.enforce(np.asarray(psi_a, dtype=float))
    values = [policy_value(model, psi, mu0, dt)]
    params = [psi.tolist()]
    for _ in range(n_iters):
        new = fam.improve(psi)
        if verify_gibbs:
            _check_gibbs(model, fam, psi, new, mu0)
        psi = new
        values.append(policy_value(model, psi, mu0, dt))
        params.append(psi.tolist())
    monotone = all(b >= a - tol for a, b in zip(values, values[1:]))
    return ImprovementResult(monotone, values, params)


__all__ = [
    "DomainError",
    "ImprovementResult",
    "LossReport",
    "first_order_check",
    "l1_policy_error",
    "martingale_loss",
    "policy_improvement_check",
    "policy_value",
]
