import numpy as np
import pytest
from scipy import stats

from countiptw.rng import RESERVED_INDEX, RngStream, substream


def test_same_stream_same_draws():
    assert np.array_equal(substream(42, 7).uniform(1000), substream(42, 7).uniform(1000))


def test_children_are_distinct_and_reproducible():
    s = substream(42, 7)
    a, b = s.child(0).uniform(100), s.child(1).uniform(100)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, substream(42, 7).child(0).uniform(100))
    assert not np.array_equal(substream(42, 7).uniform(100), RngStream(42, RESERVED_INDEX, (1,)).uniform(100))


def test_neighbouring_streams_uncorrelated():
    x = substream(42, 7).uniform(10**6)
    y = substream(42, 8).uniform(10**6)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.01


def test_uniformity_chi_square():
    u = substream(42, 0).uniform(10**6)
    counts = np.bincount((u * 100).astype(int), minlength=100)
    assert stats.chisquare(counts).pvalue > 0.001


def test_neg_binomial_moments():
    lam, k = 1.7, 1.3
    x = substream(1, 0).neg_binomial(np.full(10**6, lam), k)
    assert abs(x.mean() - lam) < 0.01
    target = lam + lam**2 / k
    assert abs(x.var() - target) / target < 0.02


def test_bernoulli_zero_and_one():
    s = substream(1, 1)
    assert s.bernoulli(np.zeros(1000)).sum() == 0
    assert s.bernoulli(np.ones(1000)).sum() == 1000


def test_mvn_correlation():
    cov = np.full((3, 3), 0.3)
    np.fill_diagonal(cov, 1.0)
    z = substream(3, 0).multivariate_normal(np.zeros(3), cov, 10**6)
    r = np.corrcoef(z.T)
    assert np.all(np.abs(r[np.triu_indices(3, 1)] - 0.3) < 0.01)


def test_invalid_parameters():
    s = substream(0, 0)
    with pytest.raises(ValueError):
        s.multivariate_normal(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 5)
    with pytest.raises(ValueError):
        s.poisson([0.0])
    with pytest.raises(ValueError):
        s.neg_binomial([1.0], 0.0)
    with pytest.raises(ValueError):
        s.bernoulli([1.5])
    with pytest.raises(ValueError):
        RngStream(-1, 0)
