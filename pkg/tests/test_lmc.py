import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import dense_loglik, small_problem
from mvdisagg.inference import marginal_loglik
from mvdisagg.lmc import (HyperParams, LatentLayout, assemble_model, check_design, hyper_names,
                          latent_layout, lmc_covariance, lmc_cross_correlation, n_hyper)
from mvdisagg.mesh_fem import assemble_fem, build_lattice_mesh


def test_two_variable_correlation():
    lam = [[0, 0], [0.3, 0]]
    T = lmc_covariance(lam, [0.25, 0.2])
    np.testing.assert_allclose(T, [[0.25, 0.075], [0.075, 0.2225]], atol=1e-15)
    C = lmc_cross_correlation(lam, [0.25, 0.2])
    assert C[0, 1] == pytest.approx(0.075 / np.sqrt(0.25 * 0.2225), rel=1e-14)
    assert C[0, 1] == pytest.approx(0.3180, abs=5e-5)


def test_two_variable_correlation_monte_carlo():
    rng = np.random.default_rng(0)
    U = rng.standard_normal((100_000, 2)) * np.sqrt([0.25, 0.2])
    W = U @ np.array([[1.0, 0.0], [0.3, 1.0]]).T
    assert np.corrcoef(W.T)[0, 1] == pytest.approx(0.3180, abs=0.01)


def test_trivial_correlations():
    np.testing.assert_array_equal(lmc_cross_correlation(np.zeros((1, 1)), [2.0]), [[1.0]])
    np.testing.assert_allclose(lmc_cross_correlation(np.zeros((3, 3)), [1.0, 2.0, 3.0]), np.eye(3))


@settings(max_examples=100)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_correlation_psd_with_unit_diagonal(M, seed):
    rng = np.random.default_rng(seed)
    lam = np.tril(rng.normal(0, 3, (M, M)), -1)
    s2 = np.exp(rng.normal(0, 2, M))
    C = lmc_cross_correlation(lam, s2)
    np.testing.assert_allclose(C, C.T)
    np.testing.assert_array_equal(np.diag(C), 1.0)
    assert np.all(np.abs(C) <= 1)
    assert np.linalg.eigvalsh(C).min() >= -1e-10


@given(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-6), st.floats(0.01, 10), st.floats(0.01, 10))
def test_correlation_sign_follows_lambda(lam21, s1, s2):
    C = lmc_cross_correlation([[0, 0], [lam21, 0]], [s1, s2])
    assert np.sign(C[0, 1]) == np.sign(lam21)


def test_layout():
    assert latent_layout(3, 625, 2).dim == 1881
    assert latent_layout(1, 1, 1).dim == 2
    L = LatentLayout(3, 625, 2)
    assert L.beta(1).start == 3 * 625 + 2
    assert L.field(2) == slice(1250, 1875)
    assert L.beta_all == slice(1875, 1881)
    with pytest.raises(ValueError):
        LatentLayout(0, 5, 1)


def test_hyperparams_vector_round_trip():
    th = HyperParams([0.1, 0.2, 0.1], [0.25, 0.2, 0.15], [0.1, 0.2, 0.15],
                     [[0, 0, 0], [0.3, 0, 0], [0.1, -0.3, 0]])
    v = th.to_vector()
    assert v.size == n_hyper(3) == 12
    back = HyperParams.from_vector(v, 3)
    np.testing.assert_allclose(back.Lambda, th.Lambda)
    np.testing.assert_allclose(back.sigma2, th.sigma2, rtol=1e-15)
    assert hyper_names(3)[-3:] == ["lambda_21", "lambda_31", "lambda_32"]
    with pytest.raises(ValueError):
        HyperParams([0.1], [-1.0], [0.1], [[0]])
    with pytest.raises(ValueError):
        HyperParams([0.1, 0.1], [1, 1], [1, 1], [[0, 1], [0, 0]])
    with pytest.raises(ValueError):
        HyperParams.from_vector(np.zeros(5), 2)


def test_single_node_regions_give_identity_operator():
    mesh = build_lattice_mesh((0, 1, 0, 1), 0.5)
    fem = assemble_fem(mesh)
    G = mesh.n_nodes
    th = HyperParams([0.5], [1.0], [0.1], [[0.0]])
    m = assemble_model(fem, sp.eye(G), np.ones((G, 1)), th, np.zeros(G))
    np.testing.assert_array_equal(m.H[:, :G].toarray(), np.eye(G))
    np.testing.assert_array_equal(m.H[:, G:].toarray(), np.ones((G, 1)))
    assert m.layout.dim == G + 1


def test_operator_structure_and_row_sums(rng):
    mesh, fem, A, X, y, _ = small_problem(rng, M=3)
    N, G = A.shape
    th = HyperParams([0.2] * 3, [0.3] * 3, [0.1] * 3, [[0, 0, 0], [0.3, 0, 0], [0.1, -0.3, 0]])
    m = assemble_model(fem, A, X, th, y)
    H = m.H.toarray()
    L = th.Lambda
    for j in range(3):
        rows = H[j * N:(j + 1) * N]
        for k in range(3):
            blk = rows[:, k * G:(k + 1) * G]
            np.testing.assert_allclose(blk, L[j, k] * A.toarray(), atol=1e-15)
            np.testing.assert_allclose(blk.sum(axis=1), L[j, k], atol=1e-12)
        betas = rows[:, 3 * G:]
        p = X.shape[1]
        for k in range(3):
            expect = X if k == j else 0
            np.testing.assert_array_equal(betas[:, k * p:(k + 1) * p], np.broadcast_to(expect, (N, p)))
    assert m.R_inv.size == 3 * N
    assert m.Q_prior.shape == (m.layout.dim,) * 2


def test_assemble_rejects_mismatches(rng):
    mesh, fem, A, X, y, _ = small_problem(rng, M=2)
    th = HyperParams([0.2] * 2, [0.3] * 2, [0.1] * 2, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        assemble_model(fem, A, X, th, y[:-1])
    with pytest.raises(ValueError):
        assemble_model(fem, A, X[:-1], th, y)
    with pytest.raises(ValueError):
        assemble_model(fem, A[:, :-1], X, th, y)
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        assemble_model(fem, A, bad, th, y)


def test_collinear_design_rejected():
    X = np.ones((10, 2))
    with pytest.raises(ValueError, match="collinear"):
        check_design(X)


def test_zero_lambda_factorises_into_univariate_models(rng):
    mesh, fem, A, X, y, _ = small_problem(rng, M=2)
    N = A.shape[0]
    th = HyperParams([0.2, 0.4], [0.3, 0.1], [0.1, 0.3], np.zeros((2, 2)))
    joint = marginal_loglik(assemble_model(fem, A, X, th, y))
    parts = [marginal_loglik(assemble_model(fem, A, X, HyperParams([th.rho[k]], [th.sigma2[k]],
                                                                   [th.noise_sd[k]], [[0.0]]),
                                            y[k * N:(k + 1) * N])) for k in range(2)]
    assert joint == pytest.approx(sum(parts), abs=1e-8)
    assert joint == pytest.approx(dense_loglik(assemble_model(fem, A, X, th, y)), abs=1e-6)
