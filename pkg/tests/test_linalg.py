import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import random_spd
from mvdisagg.linalg import (NotPositiveDefiniteError, banded_half_solve, banded_logdet, factorize,
                             factorize_banded, half_solve, logdet, marginal_sd, sample_gmrf, solve,
                             to_lower_band)

T2 = np.array([[2.0, -1.0], [-1.0, 2.0]])


def test_identity():
    f = factorize(sp.eye(6))
    assert logdet(f) == 0.0
    np.testing.assert_array_equal(f.lower_factor.toarray(), np.eye(6))
    b = np.arange(6.0)
    np.testing.assert_array_equal(solve(f, b), b)
    np.testing.assert_array_equal(marginal_sd(f), np.ones(6))


def test_two_by_two():
    f = factorize(sp.csc_matrix(T2))
    assert logdet(f) == pytest.approx(math.log(3), abs=1e-14)
    np.testing.assert_allclose(solve(f, [1.0, 1.0]), [1.0, 1.0], atol=1e-14)


def test_diagonal_examples():
    assert logdet(factorize(sp.diags([2.0, 3.0]))) == pytest.approx(math.log(6))
    assert marginal_sd(factorize(sp.diags([4.0])))[0] == pytest.approx(0.5)


def test_factor_reconstructs_permuted_matrix(rng):
    Q = random_spd(rng, 30, density=0.1)
    f = factorize(sp.csc_matrix(Q))
    L = f.lower_factor.toarray()
    P = f.permutation
    np.testing.assert_allclose(L @ L.T, Q[np.ix_(P, P)], atol=1e-10)
    assert np.allclose(np.triu(L, 1), 0)


def test_dense_oracles(rng):
    Q = random_spd(rng, 20)
    f = factorize(sp.csc_matrix(Q))
    b = rng.standard_normal(20)
    x = np.linalg.solve(Q, b)
    assert np.max(np.abs(solve(f, b) - x)) <= 1e-8 * np.max(np.abs(x))
    assert abs(logdet(f) - np.sum(np.log(np.linalg.eigvalsh(Q)))) <= 1e-8
    sd = np.sqrt(np.diag(np.linalg.inv(Q)))
    np.testing.assert_allclose(marginal_sd(f), sd, rtol=1e-8)
    np.testing.assert_allclose(marginal_sd(f, [3, 0], block=1), sd[[3, 0]], rtol=1e-8)
    z = half_solve(f, b)
    assert z @ z == pytest.approx(b @ x, rel=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_solve_residual_bound(n, seed):
    rng = np.random.default_rng(seed)
    Q = random_spd(rng, n, density=min(1.0, 4.0 / n))
    f = factorize(sp.csc_matrix(Q))
    b = rng.standard_normal(n)
    x = solve(f, b)
    r = np.max(np.abs(Q @ x - b))
    assert r <= 1e-8 * (np.max(np.abs(Q)) * np.max(np.abs(x)) + np.max(np.abs(b)))


def test_not_positive_definite_errors():
    with pytest.raises(NotPositiveDefiniteError) as exc:
        factorize(sp.diags([1.0, 0.0, 1.0]))
    assert exc.value.pivot == 1
    with pytest.raises(NotPositiveDefiniteError):
        factorize(sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]])))


def test_input_validation():
    with pytest.raises(ValueError):
        factorize(sp.csc_matrix(np.array([[2.0, 1.0], [0.0, 2.0]])))
    with pytest.raises(ValueError):
        factorize(sp.csc_matrix(np.array([[np.inf, 0.0], [0.0, 1.0]])))
    with pytest.raises(ValueError):
        factorize(sp.csc_matrix(np.ones((2, 3))))
    f = factorize(sp.eye(3))
    with pytest.raises(ValueError):
        solve(f, np.ones(4))
    with pytest.raises(IndexError):
        marginal_sd(f, [3])


def test_sampling_moments():
    f = factorize(sp.eye(3))
    X = sample_gmrf(f, rng=1, size=10_000)
    assert np.max(np.abs(np.cov(X.T) - np.eye(3))) < 0.05
    Q = sp.csc_matrix(T2)
    m = np.array([1.0, -2.0])
    X = sample_gmrf(factorize(Q), mean=m, rng=2, size=10_000)
    sd = np.sqrt(np.diag(np.linalg.inv(T2)))
    assert np.all(np.abs(X.mean(axis=0) - m) < 4 * sd / 100)
    np.testing.assert_allclose(np.cov(X.T), np.linalg.inv(T2), atol=0.03)


def test_sampling_deterministic(rng):
    f = factorize(sp.csc_matrix(random_spd(rng, 10)))
    np.testing.assert_array_equal(sample_gmrf(f, rng=5), sample_gmrf(f, rng=5))
    assert sample_gmrf(f, rng=5).shape == (10,)
    assert sample_gmrf(f, rng=5, size=4).shape == (4, 10)


def test_banded_path_matches_sparse(rng):
    n, bw = 40, 3
    Q = np.zeros((n, n))
    for k in range(bw + 1):
        v = rng.uniform(-0.2, 0.2, n - k) if k else rng.uniform(2, 3, n)
        Q += np.diag(v, k) + (np.diag(v, -k) if k else 0)
    fb = factorize_banded(to_lower_band(sp.csc_matrix(Q), bw))
    assert banded_logdet(fb) == pytest.approx(np.linalg.slogdet(Q)[1], abs=1e-10)
    b = rng.standard_normal(n)
    z = banded_half_solve(fb, b)
    assert z @ z == pytest.approx(b @ np.linalg.solve(Q, b), rel=1e-10)
    with pytest.raises(ValueError):
        to_lower_band(sp.csc_matrix(Q), bw - 1)
    with pytest.raises(NotPositiveDefiniteError):
        factorize_banded(to_lower_band(sp.csc_matrix(-Q), bw))
