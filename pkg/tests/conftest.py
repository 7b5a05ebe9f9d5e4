import numpy as np
import pytest

from mfqlearn.models import (
    LogMeanState,
    MeanVarianceState,
    benchmark_consumption,
    benchmark_mean_variance,
)
from mfqlearn.params import family_for


@pytest.fixture
def mv():
    return benchmark_mean_variance()


@pytest.fixture
def cons():
    return benchmark_consumption()


@pytest.fixture
def mv_fam(mv):
    return family_for(mv)


@pytest.fixture
def cons_fam(cons):
    return family_for(cons)


@pytest.fixture
def mv_mu0():
    return MeanVarianceState(0.0, 1.0)


@pytest.fixture
def cons_mu0():
    return LogMeanState(0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
