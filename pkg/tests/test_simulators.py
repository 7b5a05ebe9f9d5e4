import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfqlearn.models import (
    DomainError,
    LogMeanState,
    MeanVarianceState,
    ModelSpec,
    benchmark_consumption,
    benchmark_mean_variance,
)
from mfqlearn.policies import GaussianPolicy
from mfqlearn.simulators import (
    ParticleCloud,
    consumption_logmean_step,
    moment_rollout_batch,
    mv_moment_step,
    particle_rng,
    particle_step,
    rollout,
)

PSI_STAR = np.array([0.0, 0.25, 1.0, -0.25])


def test_mv_step_example(mv):
    mu, r = mv_moment_step(mv, 0.0, MeanVarianceState(0.0, 1.0), PSI_STAR, 0.04)
    assert mu.mean == pytest.approx(0.0625 * math.exp(0.25) * 0.04, abs=1e-12)
    exact = 1 + (-0.25 + 0.25 * 0.0625 * math.exp(0.5) + 0.125 * math.exp(0.25)) * 0.04
    assert mu.var == pytest.approx(exact, abs=1e-14)
    assert mu.var == pytest.approx(0.9974507, abs=2e-7)
    assert r == 0.0


def test_mv_step_zero_shift_keeps_mean(mv):
    mu, _ = mv_moment_step(mv, 0.3, MeanVarianceState(0.4, 1.0), [0.1, 0.2, 0.7, 0.0], 0.04)
    assert mu.mean == 0.4


def test_mv_step_rejects_bad_input(mv):
    with pytest.raises(ValueError):
        mv_moment_step(mv, 0.0, MeanVarianceState(0.0, 1.0), [0, 0, float("nan"), 0], 0.04)
    with pytest.raises(ValueError):
        mv_moment_step(mv, 0.0, MeanVarianceState(0.0, 1.0), PSI_STAR, 0.0)


def test_mv_variance_clamped(caplog):
    # Var coefficient sigma^2 psi3^2 - 2 b psi3 = -16 at psi3 = b / sigma^2 = 8
    model = ModelSpec("mean_variance", b=2.0, sigma=0.5, gamma=0.5, lam=1.0)
    mu, _ = mv_moment_step(model, 0.0, MeanVarianceState(0.0, 1.0), [10.0, 0.0, 8.0, 0.0], 0.1)
    assert mu.var == 0.0
    assert "clamped" in caplog.text


@settings(max_examples=60, deadline=None)
@given(
    v1=st.floats(0, 5), v2=st.floats(0, 5),
    q=st.lists(st.floats(-2, 2), min_size=4, max_size=4),
    t=st.floats(0, 1),
)
def test_mv_variance_update_linear(v1, v2, q, t):
    model = benchmark_mean_variance()
    dt = 0.01
    step = lambda v: mv_moment_step(model, t, MeanVarianceState(0.0, v), q, dt)[0].var
    coef = 1.0 + (0.25 * q[2] ** 2 - 2 * 0.25 * q[2]) * dt
    if coef < 0 or step(v2) == 0.0 or step(v1 + v2) == 0.0:
        return
    assert step(v1 + v2) - step(v2) == pytest.approx(coef * v1, abs=1e-10)


def test_consumption_step_example(cons):
    mu, r = consumption_logmean_step(cons, 0.0, LogMeanState(0.0), 0.0625, 0.05)
    e = math.exp(-10.0)
    assert mu.log_mean == pytest.approx((0.0625 * 0.25 * (1 - e) - 10.0 / (1 - e)) * 0.05, abs=1e-12)
    assert mu.log_mean == pytest.approx(-0.499242, abs=1e-6)


def test_consumption_large_horizon_drift():
    model = ModelSpec("consumption", b=0.5, sigma=0.5, gamma=0.25, beta=10.0, T=100.0)
    mu, _ = consumption_logmean_step(model, 0.0, LogMeanState(0.0), 0.0, 0.05)
    assert mu.log_mean == -10.0 * 0.05


def test_consumption_reward_digamma(cons):
    # exact reward at s ~ 1, log mean 0, psi_tilde = 0:
    # digamma(5) - log(1.25/2.5) - gamma/2
    _, r = consumption_logmean_step(cons, 0.0, LogMeanState(0.0), 0.0, 0.05)
    s = 1 - math.exp(-10.0)
    assert r == pytest.approx(1.5061177 - math.log(0.5 * s) - 0.125, abs=1e-7)
    _, rp = consumption_logmean_step(cons, 0.0, LogMeanState(0.0), 0.0, 0.05, reward_variant="printed")
    assert rp == pytest.approx(1.5061177 - math.log(0.5 * s) + 0.0625 / 4, abs=1e-7)


def test_consumption_at_horizon(cons):
    with pytest.raises(DomainError):
        consumption_logmean_step(cons, 1.0, LogMeanState(0.0), 0.0625, 0.05)
    with pytest.raises(ValueError):
        consumption_logmean_step(cons, 0.0, LogMeanState(0.0), 0.0625, 0.05, reward_variant="other")


def test_moment_steps_deterministic(mv, cons):
    a = mv_moment_step(mv, 0.2, MeanVarianceState(0.1, 0.8), [0.3, 0.1, 0.9, -0.2], 0.04)
    b = mv_moment_step(mv, 0.2, MeanVarianceState(0.1, 0.8), [0.3, 0.1, 0.9, -0.2], 0.04)
    assert a == b
    c = consumption_logmean_step(cons, 0.2, LogMeanState(0.1), 0.05, 0.05)
    d = consumption_logmean_step(cons, 0.2, LogMeanState(0.1), 0.05, 0.05)
    assert c[0] == d[0] and c[1] == d[1]


def test_rollout_single_step(mv):
    traj = rollout(mv, "moment", MeanVarianceState(0.0, 1.0), PSI_STAR, 1, 1.0)
    mu, _ = mv_moment_step(mv, 0.0, MeanVarianceState(0.0, 1.0), PSI_STAR, 1.0)
    assert traj.states[1] == mu
    assert traj.terminal == pytest.approx(mu.mean - 2.0 * mu.var)
    assert traj.K == 1


def test_mv_rollout_golden(mv, mv_mu0):
    traj = rollout(mv, "moment", mv_mu0, PSI_STAR, 25, 0.04)
    assert traj.states[-1].mean == pytest.approx(0.07136197766142696, abs=1e-13)
    assert traj.states[-1].var == pytest.approx(0.9220098424728294, abs=1e-13)
    assert traj.terminal == pytest.approx(-1.7726577072842318, abs=1e-13)
    assert np.all(traj.rewards == 0.0)
    np.testing.assert_allclose(np.diff(traj.times), 0.04, atol=1e-15)


def test_consumption_rollout_golden(cons, cons_mu0):
    traj = rollout(cons, "moment", cons_mu0, [0.0625], 20, 0.05)
    assert traj.states[-1].log_mean == pytest.approx(-11.379170254022604, abs=1e-12)
    assert traj.rewards[0] == pytest.approx(2.073333776121841, abs=1e-12)
    assert traj.rewards[-1] == pytest.approx(-7.101864821689386, abs=1e-12)
    assert traj.rewards.sum() == pytest.approx(-52.798078720696694, abs=1e-10)
    assert traj.terminal == 0.0


def test_batch_rollout_matches_single(mv, cons, mv_mu0, cons_mu0, rng):
    pts = PSI_STAR * rng.uniform(0.5, 1.5, (3, 4))
    times, (mean, var), rewards, terminal = moment_rollout_batch(mv, mv_mu0, pts, 25, 0.04)
    for m in range(3):
        tr = rollout(mv, "moment", mv_mu0, pts[m], 25, 0.04)
        np.testing.assert_allclose(mean[:, m], [s.mean for s in tr.states], rtol=0, atol=1e-14)
        np.testing.assert_allclose(var[:, m], [s.var for s in tr.states], rtol=0, atol=1e-14)
        assert terminal[m] == pytest.approx(tr.terminal, abs=1e-14)
    pts = np.array([[0.01], [0.05]])
    _, (lm,), rewards, _ = moment_rollout_batch(cons, cons_mu0, pts, 20, 0.05)
    tr = rollout(cons, "moment", cons_mu0, pts[1], 20, 0.05)
    np.testing.assert_allclose(lm[:, 1], [s.log_mean for s in tr.states], atol=1e-14)
    np.testing.assert_allclose(rewards[:, 1], tr.rewards, atol=1e-14)


def test_rollout_grid_checks(mv, mv_mu0):
    with pytest.raises(ValueError):
        rollout(mv, "moment", mv_mu0, PSI_STAR, 30, 0.04)
    with pytest.raises(ValueError):
        rollout(mv, "other", mv_mu0, PSI_STAR, 25, 0.04)
    with pytest.raises(ValueError):
        rollout(mv, "particle", mv_mu0, PSI_STAR, 25, 0.04)


def test_trajectory_csv(tmp_path, mv, cons, mv_mu0, cons_mu0):
    p = tmp_path / "mv.csv"
    rollout(mv, "moment", mv_mu0, PSI_STAR, 25, 0.04).to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["k", "t", "mean", "variance", "reward"]
    assert len(rows) == 27
    assert float(rows[-1][4]) == pytest.approx(-1.7726577072842318)
    p = tmp_path / "c.csv"
    rollout(cons, "moment", cons_mu0, [0.0625], 20, 0.05).to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0][2] == "log_mean" and rows[1][3] == ""
    assert float(rows[-1][4]) == 0.0


def test_particle_cloud_validation():
    with pytest.raises(ValueError):
        ParticleCloud(np.array([1.0]))
    with pytest.raises(ValueError):
        ParticleCloud(np.array([1.0, np.inf]))


def test_particle_step_zero_dynamics(rng):
    frozen = ModelSpec("mean_variance", b=0.0, sigma=0.0, gamma=0.5, lam=1.0)
    cloud = ParticleCloud(rng.normal(size=100))
    new = particle_step(frozen, cloud, 0.0, GaussianPolicy.constant(0.3, 1.0), 0.1, rng)
    np.testing.assert_array_equal(new.positions, cloud.positions)


def test_particle_rng_streams():
    a = particle_rng(1, 2, 3).normal(size=3)
    b = particle_rng(1, 2, 3).normal(size=3)
    c = particle_rng(1, 2, 4).normal(size=3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_particle_reward_adjudicates_consumption_reward(cons):
    # empirical E[log c] - E[a^2] over the particles versus both closed forms
    mu0 = LogMeanState(0.0)
    pt = [0.3]
    p = rollout(cons, "particle", mu0, pt, 5, 0.01, rng=particle_rng(0), n_particles=200_000)
    m = rollout(cons, "moment", mu0, pt, 5, 0.01)
    pr = rollout(cons, "moment", mu0, pt, 5, 0.01, reward_variant="printed")
    assert abs(p.rewards[0] - m.rewards[0]) < 0.01
    assert abs(p.rewards[0] - pr.rewards[0]) > 0.1
