import dataclasses
import warnings

import numpy as np
import pytest

from mvdisagg.aggregation import FineGrid, aggregate_field
from mvdisagg.inference import FitConfig
from mvdisagg.linalg import factorize, sample_gmrf
from mvdisagg.mesh_fem import (MaternParams, assemble_fem, build_lattice_mesh, matern_correlation,
                               matern_covariance, matern_to_spde, spde_precision)
from mvdisagg.simstudy import (COVERAGE_ROWS, ReplicateRecord, SimParams, StudyConfig, StudyReport,
                               acceptance_probability, discrete_voronoi, make_observations,
                               regular_partition, replicate_rngs, rmse, run_replicate, run_study,
                               sample_ipp, sample_matern_dense, scenario, scenario_regions,
                               simulate_lmc_fields, study_grid)


def test_parameter_defaults():
    p = SimParams()
    assert p.alpha == (0.1, 0.05, -0.1)
    assert p.lam == (0.3, 0.1, -0.3)
    assert p.sigma2 == (0.25, 0.2, 0.15)
    assert p.rho == (0.1, 0.2, 0.1)
    assert p.noise_sd == (0.1, 0.2, 0.15)
    np.testing.assert_array_equal(p.Lambda, [[1, 0, 0], [0.3, 1, 0], [0.1, -0.3, 1]])
    assert len(COVERAGE_ROWS) == 15
    assert SimParams.table_as_sd().sigma2 == pytest.approx((0.0625, 0.04, 0.0225))


def test_scenarios():
    assert [scenario(i).gamma for i in (1, 2, 3)] == [36, 64, 144]
    assert [scenario(i).k for i in (4, 5, 6)] == [6, 8, 12]
    with pytest.raises(ValueError):
        scenario(7)
    g = study_grid()
    assert g.n_cells == 2304 and g.points.min() == 0 and g.points.max() == 1


def _lag_cov(X, n, lag):
    """Mean product of horizontally ``lag``-separated values (zero mean)."""
    F = X.reshape(X.shape[0], n, n)
    return float(np.mean(F[:, :, :-lag] * F[:, :, lag:]))


def test_dense_matern_covariance():
    X = sample_matern_dense(0.25, 0.1, rng=0, size=2000)
    assert X.shape == (2000, 2304)
    h = 1 / 47
    assert np.mean(X**2) == pytest.approx(0.25, rel=0.05)
    assert _lag_cov(X, 48, 1) == pytest.approx(float(matern_covariance(h, 0.25, 0.1)), rel=0.05)
    assert matern_covariance(0.0, 0.25, 0.1) == 0.25


def test_dense_matern_correlation_at_range():
    X = sample_matern_dense(1.0, 0.3, rng=1, n=11, size=4000)
    assert _lag_cov(X, 11, 3) == pytest.approx(float(matern_correlation(0.3, 0.3)), abs=0.03)
    assert float(matern_correlation(0.3, 0.3)) == pytest.approx(0.14, abs=0.005)
    with pytest.raises(ValueError):
        sample_matern_dense(1.0, 0.1, n=65)


@pytest.mark.parametrize("s2, rho", [(0.25, 0.1), (0.2, 0.2)])
def test_dense_and_spde_samplers_agree(s2, rho):
    # mesh nodes include the 48 x 48 points; at a spacing of one grid step
    # the GMRF is visibly rougher at lag 1, so the mesh is three times finer
    n = 48
    dense = sample_matern_dense(s2, rho, rng=2, size=1000)
    mesh = build_lattice_mesh((0, 1, 0, 1), 1 / 141, rho)
    Q = spde_precision(assemble_fem(mesh), *matern_to_spde(MaternParams(s2, rho)))
    X = sample_gmrf(factorize(Q), rng=3, size=1000)
    g = mesh.node_coords * 47
    on = mesh.interior_mask & np.all(np.abs(g - np.round(g)) < 1e-6, axis=1)
    spde = X[:, on]
    assert spde.shape[1] == n * n

    def vario(X, lag):
        F = X.reshape(-1, n, n)[:, 10:38, 10:38]
        return float(np.mean((F[:, :, :-lag] - F[:, :, lag:]) ** 2))

    for lag in (1, 2, 4, 7, 10):
        assert vario(spde, lag) == pytest.approx(vario(dense, lag), rel=0.10)


def test_lmc_fields():
    p = SimParams()
    W = np.array([simulate_lmc_fields(p, rng=s) for s in range(200)])  # (200, 3, 2304)
    Wc = W - W.mean(axis=0)
    c = (Wc[:, 0] * Wc[:, 1]).mean(axis=0) / (Wc[:, 0].std(axis=0) * Wc[:, 1].std(axis=0))
    assert c.mean() == pytest.approx(0.075 / np.sqrt(0.25 * 0.2225), abs=0.05)
    m3 = W[:, 2].mean(axis=1)
    assert abs(m3.mean() - (-0.1)) <= 3 * m3.std(ddof=1) / np.sqrt(200)
    # lambda = 0: independent shifted fields
    q = dataclasses.replace(p, lam=(0.0, 0.0, 0.0))
    V = np.array([simulate_lmc_fields(q, rng=s) for s in range(200)])
    Vc = V - V.mean(axis=0)
    c0 = (Vc[:, 0] * Vc[:, 1]).mean(axis=0) / (Vc[:, 0].std(axis=0) * Vc[:, 1].std(axis=0))
    assert abs(c0.mean()) < 0.05
    np.testing.assert_array_equal(simulate_lmc_fields(p, rng=5), simulate_lmc_fields(p, rng=5))


def test_ipp():
    assert acceptance_probability(1, 1) == 1.0 and acceptance_probability(0, 0) == 0.0
    rng = np.random.default_rng(4)
    draws = [sample_ipp(64, rng) for _ in range(1000)]
    assert abs(np.mean([d.shape[0] for d in draws]) - 64) <= 1
    hi = np.mean([np.sum(np.all(d >= 0.5, axis=1)) for d in draws])
    lo = np.mean([np.sum(np.all(d < 0.5, axis=1)) for d in draws])
    assert hi > lo
    assert all(np.all((d >= 0) & (d <= 1)) for d in draws)
    with pytest.raises(ValueError):
        sample_ipp(0)


def test_discrete_voronoi():
    g = study_grid()
    r = discrete_voronoi([(0.25, 0.5), (0.75, 0.5)], g)
    assert r.n_regions == 2
    np.testing.assert_array_equal(r.cell_assignment, (g.points[:, 0] > 0.5).astype(int))
    one = discrete_voronoi([(0.5, 0.5), (0.5, 0.5)], g)  # the tie goes to seed 0
    assert one.n_regions == 1 and np.all(one.cell_assignment == 0)
    with pytest.raises(ValueError):
        discrete_voronoi([(0.5, 0.5)], g)
    rng = np.random.default_rng(0)
    for _ in range(20):
        seeds = rng.random((int(rng.integers(2, 200)), 2))
        assert discrete_voronoi(seeds, g).n_regions <= len(seeds)


def test_regular_partition():
    r = regular_partition(6)
    assert r.n_regions == 36 and np.all(r.cell_counts == 64)
    r = regular_partition(12)
    assert r.n_regions == 144 and np.all(r.cell_counts == 16)
    with pytest.raises(ValueError):
        regular_partition(5)


def test_scenario_regions_reproducible():
    a = scenario_regions(scenario(3), rng=9)
    b = scenario_regions(scenario(3), rng=9)
    np.testing.assert_array_equal(a.cell_assignment, b.cell_assignment)
    assert 50 < a.n_regions < 250


def test_observations():
    r = regular_partition(6)
    W = simulate_lmc_fields(rng=0)
    means = np.concatenate([aggregate_field(w, r) for w in W])
    np.testing.assert_array_equal(make_observations(W, r, [0, 0, 0], rng=1), means)
    sd = np.array([0.1, 0.2, 0.15])
    E = np.array([make_observations(W, r, sd, rng=s) - means for s in range(500)]).reshape(500, 3, 36)
    np.testing.assert_allclose(E.var(axis=(0, 2)), sd**2, rtol=0.10)
    np.testing.assert_array_equal(make_observations(W, r, sd, rng=3), make_observations(W, r, sd, rng=3))


def test_rmse():
    x = np.random.default_rng(0).standard_normal(100)
    assert rmse(x, x) == 0
    assert rmse(x + 2, x) == pytest.approx(2)
    p = np.random.default_rng(1).permutation(100)
    assert rmse(x[p] + 1, x[p] ** 2) == pytest.approx(rmse(x + 1, x**2), rel=1e-14)


def test_common_random_numbers():
    f4, r4 = replicate_rngs(1, 4, 3)
    f6, r6 = replicate_rngs(1, 6, 3)
    np.testing.assert_array_equal(f4.standard_normal(5), f6.standard_normal(5))
    assert not np.array_equal(r4.standard_normal(5), r6.standard_normal(5))


def test_report_summaries():
    recs = []
    for rep in range(4):
        r = ReplicateRecord(6, rep, 144)
        r.hits = {row: rep != 0 for row in COVERAGE_ROWS}
        for j in range(3):
            r.rmse[(j, "disaggregation")] = 0.1 * (rep + 1)
            r.rmse[(j, "areal")] = 0.25
        recs.append(r)
    recs.append(ReplicateRecord(6, 4, 144, failed="disaggregation: boom"))
    rep = StudyReport(StudyConfig(scenarios=(6,)), recs)
    assert rep.coverage(6, "alpha_1") == 0.75
    assert rep.failures(6) == 1
    assert rep.mean_rmse(6, 0) == pytest.approx(0.25)
    assert rep.win_fraction(6) == 0.5
    table = rep.coverage_table()
    assert [t[0] for t in table] == list(COVERAGE_ROWS) and all(len(t) == 2 for t in table)
    assert len(rep.rmse_rows()) == 24


def test_replicate_smoke_and_worker_independence():
    cfg = StudyConfig(scenarios=(4,), n_replicates=1, mesh_h=1 / 12, mesh_ext=0.2, theta_samples=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rec = run_replicate(4, 0, cfg)
        assert rec.failed is None and rec.n_regions == 36
        assert set(rec.hits) == set(COVERAGE_ROWS)
        assert set(rec.rmse) == {(j, m) for j in range(3) for m in ("disaggregation", "areal")}
        a = run_study(cfg, workers=1)
        b = run_study(cfg, workers=2)
    assert a.records == b.records == [rec]
    with pytest.raises(ValueError):
        StudyConfig(n_replicates=0)
    with pytest.raises(ValueError):
        StudyConfig(scenarios=(9,))
