import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from mfqlearn.models import DomainError, LogMeanState, MeanVarianceState
from mfqlearn.policies import (
    GammaPolicy,
    GaussianPolicy,
    ProductPolicy,
    entropy,
    gamma_entropy,
    gamma_kl,
    gamma_logpdf,
    gaussian_entropy,
    gaussian_kl,
    gibbs_improve,
    kl_average,
    log_density,
    sample,
)
from scipy.special import digamma

MU = MeanVarianceState(0.0, 1.0)
EULER_GAMMA = 0.5772156649015329


def digamma_integer(n):
    return -EULER_GAMMA + sum(1.0 / k for k in range(1, n))


def test_digamma_against_series():
    assert digamma_integer(5) == pytest.approx(1.5061176684318003, abs=1e-12)
    for n in (1, 2, 5, 9):
        assert digamma(n) == pytest.approx(digamma_integer(n), abs=1e-12)


def test_frozen_densities_and_entropies():
    # 5 log 2 - 2 - log 24
    assert gamma_logpdf(1.0, 5.0, 2.0) == pytest.approx(-1.712318, abs=1e-6)
    # 5 - log 2 + log 24 - 4 digamma(5)
    assert gamma_entropy(5.0, 2.0) == pytest.approx(1.460435, abs=1e-6)
    assert gaussian_entropy(0.25) == pytest.approx(0.725791, abs=1e-6)


def test_log_density_outside_support():
    pol = GammaPolicy.constant(5.0, 2.0)
    assert log_density(pol, 0.0, 0.0, MU, -1.0) == -np.inf
    assert log_density(pol, 0.0, 0.0, MU, 0.0) == -np.inf


def test_product_density_is_sum():
    pol = ProductPolicy(GaussianPolicy.constant(0.1, 0.5), GammaPolicy.constant(3.0, 1.5))
    got = log_density(pol, 0.0, 0.0, MU, (0.3, 0.7))
    want = log_density(pol.investment, 0.0, 0.0, MU, 0.3) + log_density(pol.consumption, 0.0, 0.0, MU, 0.7)
    assert got == pytest.approx(want)
    assert entropy(pol, 0.0, 0.0, MU) == pytest.approx(gaussian_entropy(0.5) + gamma_entropy(3.0, 1.5))


def test_entropy_matches_quadrature():
    f = lambda c: -math.exp(gamma_logpdf(c, 5.0, 2.0)) * gamma_logpdf(c, 5.0, 2.0)
    assert quad(f, 0, 60)[0] == pytest.approx(gamma_entropy(5.0, 2.0), abs=1e-8)


def test_gamma_kl_matches_quadrature():
    a1, r1, a2, r2 = 3.0, 1.2, 5.0, 2.5
    f = lambda c: math.exp(gamma_logpdf(c, a1, r1)) * (gamma_logpdf(c, a1, r1) - gamma_logpdf(c, a2, r2))
    assert quad(f, 0, 80)[0] == pytest.approx(gamma_kl(a1, r1, a2, r2), abs=1e-8)


def test_gaussian_kl_matches_quadrature():
    m1, v1, m2, v2 = 0.2, 0.5, -0.4, 1.3

    def logn(a, m, v):
        return -0.5 * math.log(2 * math.pi * v) - 0.5 * (a - m) ** 2 / v

    f = lambda a: math.exp(logn(a, m1, v1)) * (logn(a, m1, v1) - logn(a, m2, v2))
    assert quad(f, -20, 20)[0] == pytest.approx(gaussian_kl(m1, v1, m2, v2), abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(
    m1=st.floats(-3, 3), m2=st.floats(-3, 3),
    v1=st.floats(0.05, 4), v2=st.floats(0.05, 4),
    a1=st.floats(0.5, 8), a2=st.floats(0.5, 8),
    r1=st.floats(0.2, 5), r2=st.floats(0.2, 5),
)
def test_kl_nonnegative(m1, m2, v1, v2, a1, a2, r1, r2):
    p = GaussianPolicy(lambda t, x, mu: m1 + 0.3 * x, lambda t, mu: v1)
    q = GaussianPolicy(lambda t, x, mu: m2 - 0.1 * x, lambda t, mu: v2)
    assert kl_average(p, q, 0.0, MU) >= 0.0
    assert kl_average(p, p, 0.0, MU) == pytest.approx(0.0, abs=1e-12)
    assert gamma_kl(a1, r1, a2, r2) >= -1e-12
    assert gamma_kl(a1, r1, a1, r1) == pytest.approx(0.0, abs=1e-12)


def test_kl_average_over_state_law():
    # mean gap depends on x; KL = E[(0.5 x)^2] / (2 v) with x ~ N(0, 1)
    p = GaussianPolicy(lambda t, x, mu: 0.5 * x, lambda t, mu: 1.0)
    q = GaussianPolicy(lambda t, x, mu: 0.0 * x, lambda t, mu: 1.0)
    assert kl_average(p, q, 0.0, MU) == pytest.approx(0.125, abs=1e-10)


def test_kl_average_log_mean_state():
    p = GammaPolicy(2.0, lambda t, mu: 1.0 / mu.mean)
    q = GammaPolicy(2.0, lambda t, mu: 2.0 / mu.mean)
    assert kl_average(p, q, 0.0, LogMeanState(0.3)) == pytest.approx(gamma_kl(2.0, 1.0, 2.0, 2.0))


def test_kl_average_family_mismatch():
    with pytest.raises(ValueError):
        kl_average(GaussianPolicy.constant(0, 1), GammaPolicy.constant(2, 1), 0.0, MU)


def test_invalid_parameters():
    with pytest.raises(DomainError):
        GaussianPolicy.constant(0.0, 0.0).var(0.0, MU)
    with pytest.raises(DomainError):
        GammaPolicy.constant(0.0, 1.0)
    with pytest.raises(DomainError):
        GammaPolicy.constant(2.0, -1.0).rate(0.0, MU)


def test_sampling_moments(rng):
    pol = ProductPolicy(GaussianPolicy.constant(0.3, 0.5), GammaPolicy.constant(5.0, 2.0))
    a, c = sample(pol, 0.0, np.zeros(200_000), MU, rng, size=200_000)
    assert abs(a.mean() - 0.3) < 4 * math.sqrt(0.5 / 2e5)
    assert abs(a.var() - 0.5) < 0.01
    assert abs(c.mean() - 2.5) < 4 * math.sqrt(1.25 / 2e5)
    assert np.all(c > 0)


def test_sampling_is_reproducible():
    pol = GaussianPolicy.constant(0.0, 1.0)
    a = sample(pol, 0.0, 0.0, MU, np.random.default_rng(7), size=5)
    b = sample(pol, 0.0, 0.0, MU, np.random.default_rng(7), size=5)
    np.testing.assert_array_equal(a, b)


def test_gibbs_gaussian():
    gamma = 0.5
    pol = gibbs_improve(lambda a: -2.0 * (a - 0.7) ** 2 + 3.0, "gaussian", gamma)
    assert pol.mean(0.0, 0.0, MU) == pytest.approx(0.7)
    assert pol.var(0.0, MU) == pytest.approx(gamma / 4.0)


def test_gibbs_gamma():
    gamma = 0.25
    pol = gibbs_improve(lambda c: 1.0 * math.log(c) - 0.8 * c + 2.0, "gamma", gamma)
    assert pol.shape == pytest.approx(1.0 + 1.0 / gamma)
    assert pol.rate(0.0, MU) == pytest.approx(0.8 / gamma)


def test_gibbs_product():
    pol = gibbs_improve(lambda a, c: -(a - 0.2) ** 2 + math.log(c) - c, "product", 0.5)
    assert pol.investment.mean(0.0, 0.0, MU) == pytest.approx(0.2)
    assert pol.consumption.shape == pytest.approx(3.0)


def test_gibbs_non_integrable():
    with pytest.raises(DomainError):
        gibbs_improve(lambda a: a**2, "gaussian", 0.5)
    with pytest.raises(DomainError):
        gibbs_improve(lambda c: math.log(c) + 0.5 * c, "gamma", 0.5)
    with pytest.raises(ValueError):
        gibbs_improve(lambda a: -a * a, "beta", 0.5)
