import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import gp_condition, gp_log_density, spectral_covariance

from spdefem import gp
from spdefem.gp import (
    DENSE_LIMIT,
    ObservationSet,
    gp_log_marginal,
    gp_log_marginal_dense,
    gp_objective,
    gp_posterior_dense,
    gp_posterior_sparse,
    gp_posterior_variance_at,
    observed_operator,
    read_observations,
    write_observations,
)
from spdefem.mesh import rectangle_mesh, uniform_interval
from spdefem.spde import MaternParams, build_field, sample_field


def problem(n=30, nu=1.5, n_y=6, n_o=1, sigma_e=0.1, seed=0, length=3.0):
    rng = np.random.default_rng(seed)
    mesh = uniform_interval(0, length, n)
    field = build_field(mesh, MaternParams(1.0, 0.6, nu, 1), m=4)
    pts = rng.uniform(0, length, (n_y, 1))
    Y = rng.standard_normal((n_y, n_o))
    return mesh, field, ObservationSet.at_points(mesh, pts, Y, sigma_e)


# ---------------------------------------------------------------------------
# observation sets


def test_observation_set_validation():
    mesh = uniform_interval(0, 1, 5)
    with pytest.raises(ValueError, match="noise"):
        ObservationSet.at_points(mesh, [[0.5]], [[1.0]], 0.0)
    with pytest.raises(ValueError, match="reading rows"):
        ObservationSet.at_points(mesh, [[0.5]], [[1.0], [2.0]], 0.1)
    obs = ObservationSet.at_points(mesh, [0.1, 0.7], [1.0, 2.0], 0.1)
    assert (obs.n_y, obs.n_o) == (2, 1)
    assert obs.with_noise(0.3).sigma_e == 0.3


def test_observation_csv_round_trip(tmp_path):
    path = tmp_path / "obs.csv"
    pts = np.array([[0.1, 0.2], [0.3, 0.4 + 1e-13]])
    Y = np.array([[1.0, 2.0, 3.0], [-1.0, math.pi, 1e-300]])
    write_observations(path, pts, Y)
    assert path.read_text().splitlines()[0] == "x1,x2,y1,y2,y3"
    p2, y2 = read_observations(path)
    np.testing.assert_array_equal(p2, pts)
    np.testing.assert_array_equal(y2, Y)


@pytest.mark.parametrize("text, fragment", [
    ("a,b\n1,2\n", "header"),
    ("x1,y1\n1\n", ":2:"),
    ("x1,y1\n1,abc\n", "non-numeric"),
    ("", "empty"),
])
def test_observation_csv_errors(tmp_path, text, fragment):
    path = tmp_path / "obs.csv"
    path.write_text(text)
    with pytest.raises(ValueError, match=fragment):
        read_observations(path)


# ---------------------------------------------------------------------------
# dense formulation


def test_no_observations_return_prior():
    _, field, _ = problem()
    C = field.dense_covariance()
    empty = ObservationSet(np.zeros((0, 1)), sp.csr_matrix((0, field.n)), np.zeros((0, 1)), 0.1)
    mean, cov = gp_posterior_dense(C, empty)
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_array_equal(cov, C)


def test_interpolation_limit():
    mesh, field, _ = problem()
    obs = ObservationSet.at_points(mesh, mesh.nodes[[7]], [[0.83]], 1e-12)
    mean, _ = gp_posterior_dense(field.dense_covariance(), obs)
    assert abs(mean[7] - 0.83) <= 1e-6


def test_dense_size_guard():
    big = np.eye(DENSE_LIMIT + 1)
    obs = ObservationSet(np.zeros((1, 1)), sp.csr_matrix(([1.0], ([0], [0])), (1, DENSE_LIMIT + 1)),
                         [[1.0]], 0.1)
    with pytest.raises(ValueError, match="limited"):
        gp_posterior_dense(big, obs)
    with pytest.raises(ValueError, match="limited"):
        gp_log_marginal_dense(big, obs)


@pytest.mark.parametrize("n_o", [1, 3])
def test_dense_formulation_matches_oracle(n_o):
    _, field, obs = problem(n_o=n_o)
    C = spectral_covariance(field)
    mean, cov = gp_posterior_dense(C, obs)
    ref_mean, ref_cov = gp_condition(C, obs.P.toarray(), obs.Y, obs.sigma_e)
    np.testing.assert_allclose(mean, ref_mean, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(cov, ref_cov, atol=1e-12)
    assert abs(gp_log_marginal_dense(C, obs) - gp_log_density(C, obs.P.toarray(), obs.Y, obs.sigma_e)) < 1e-10


# ---------------------------------------------------------------------------
# sparse formulation


@pytest.mark.parametrize("nu", [1.5, 2.2, 3.95])
def test_sparse_mean_matches_dense(nu):
    _, field, obs = problem(nu=nu)
    post = gp_posterior_sparse(field, obs)
    ref, _ = gp_condition(spectral_covariance(field), obs.P.toarray(), obs.Y, obs.sigma_e)
    assert np.linalg.norm(post.mean - ref) <= 1e-8 * np.linalg.norm(ref)


@pytest.mark.parametrize("n_o", [1, 2, 5])
def test_repeated_readings_equal_stacking(n_o):
    _, field, obs = problem(nu=2.2, n_o=n_o)
    C = spectral_covariance(field)
    ref_mean, ref_cov = gp_condition(C, obs.P.toarray(), obs.Y, obs.sigma_e)
    post = gp_posterior_sparse(field, obs)
    assert np.linalg.norm(post.mean - ref_mean) <= 1e-8 * np.linalg.norm(ref_mean)
    var = gp_posterior_variance_at(post, np.arange(field.n))
    np.testing.assert_allclose(var, np.diag(ref_cov), rtol=1e-8)


def test_single_reading_uses_the_reading_itself():
    _, field, obs = problem(n_o=1)
    twice = ObservationSet(obs.points, obs.P, np.hstack([obs.Y, obs.Y]), obs.sigma_e * math.sqrt(2))
    # two identical readings with noise variance 2σ² carry the information of one with σ²
    a = gp_posterior_sparse(field, obs)
    b = gp_posterior_sparse(field, twice)
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-10)


def test_line_regression_example():
    mesh = uniform_interval(0, 10, 101)
    field = build_field(mesh, MaternParams(0.15, 1.0, 3.95, 1), m=6)
    truth = sample_field(field, 1, seed=4)[:, 0]
    idx = np.arange(0, 101, 10)
    obs = ObservationSet.at_points(mesh, mesh.nodes[idx], truth[idx] + 0.01 * np.random.default_rng(5).standard_normal(11), 0.01)
    post = gp_posterior_sparse(field, obs)
    prior_var = np.diag(field.dense_covariance())
    var = gp_posterior_variance_at(post, np.arange(101))
    assert np.all(var[idx] < 0.05 * prior_var[idx])
    assert np.all(var <= prior_var + 1e-12)
    np.testing.assert_allclose(post.mean[idx], obs.Y[:, 0], atol=0.03)
    # the 95% band between data points is wider than at them
    assert var[5] > 5 * var[0 + 10]


def test_variance_at_observed_node():
    mesh, field, _ = problem()
    se = 1e-3
    obs = ObservationSet.at_points(mesh, mesh.nodes[[4, 12]], [[0.2], [-0.1]], se)
    post = gp_posterior_variance_at(gp_posterior_sparse(field, obs), [4, 12])
    assert np.all(post >= 0)
    assert np.all(post <= 1.1 * se**2)


def test_variance_matches_dense_diagonal():
    _, field, obs = problem(nu=2.2, n_y=8, seed=3)
    _, cov = gp_posterior_dense(spectral_covariance(field), obs)
    var = gp_posterior_variance_at(gp_posterior_sparse(field, obs), np.arange(field.n), block=7)
    np.testing.assert_allclose(var, np.diag(cov), rtol=1e-8)


def test_variance_index_check():
    _, field, obs = problem()
    with pytest.raises(IndexError):
        gp_posterior_variance_at(gp_posterior_sparse(field, obs), [field.n])


def test_observed_operator_is_p_times_fr():
    _, field, obs = problem(nu=2.2)
    dense = obs.P.toarray() @ field.F_r.to_sparse().toarray()
    np.testing.assert_allclose(observed_operator(field, obs.P).toarray(), dense, rtol=1e-13, atol=1e-15)
    with pytest.raises(ValueError):
        observed_operator(field, sp.csr_matrix((1, field.n + 1)))


# ---------------------------------------------------------------------------
# marginal likelihood


def test_tiny_log_marginal():
    mesh = uniform_interval(0, 1, 2)
    field = build_field(mesh, MaternParams(1.0, 0.5, 1.5, 1))
    obs = ObservationSet.at_points(mesh, [[0.3]], [[0.4]], 0.2)
    ref = gp_log_density(field.dense_covariance(), obs.P.toarray(), obs.Y, 0.2)
    assert abs(gp_log_marginal(field, obs) - ref) <= 1e-10


@pytest.mark.parametrize("nu", [1.5, 2.2])
def test_log_marginal_repeated_readings(nu):
    _, field, obs = problem(nu=nu, n_o=3, seed=2)
    ref = gp_log_density(spectral_covariance(field), obs.P.toarray(), obs.Y, obs.sigma_e)
    assert abs(gp_log_marginal(field, obs) - ref) <= 1e-8
    assert abs(gp_log_marginal(field, obs, method="observation") - ref) <= 1e-8


@pytest.mark.parametrize("method", ["precision", "observation"])
def test_log_marginal_independent_readings(method):
    _, field, obs = problem(nu=2.2, n_o=4, seed=6)
    ref = gp_log_density(spectral_covariance(field), obs.P.toarray(), obs.Y, obs.sigma_e,
                         independent=True)
    assert abs(gp_log_marginal(field, obs, "independent", method=method) - ref) <= 1e-8


def test_log_marginal_drops_when_data_move_away():
    _, field, obs = problem(nu=1.5, n_o=2)
    base = gp_log_marginal(field, obs)
    shifted = ObservationSet(obs.points, obs.P, obs.Y + 10.0, obs.sigma_e)
    assert gp_log_marginal(field, shifted) < base


def test_log_marginal_argument_checks():
    _, field, obs = problem()
    with pytest.raises(ValueError):
        gp_log_marginal(field, obs, readings="both")
    with pytest.raises(ValueError):
        gp_log_marginal(field, obs, method="fast")


@pytest.mark.parametrize("method", ["precision", "observation"])
def test_objective_evaluates_log_marginal(method):
    mesh, _, obs = problem(nu=2.2, n_o=2)
    objective = gp_objective(mesh, obs, 2.2, m=4, method=method)
    for sigma, ell in ((1.0, 0.6), (0.5, 0.9), (1.0, 0.6)):
        field = build_field(mesh, MaternParams(sigma, ell, 2.2, 1), m=4)
        assert abs(objective({"sigma": sigma, "ell": ell}) - gp_log_marginal(field, obs)) <= 1e-8
    field = build_field(mesh, MaternParams(1.0, 0.6, 2.2, 1), m=4)
    v = objective({"sigma": 1.0, "ell": 0.6, "sigma_e": 0.3})
    assert abs(v - gp_log_marginal(field, obs.with_noise(0.3))) <= 1e-8


def test_two_dimensional_problem():
    mesh = rectangle_mesh(6, 6)
    field = build_field(mesh, MaternParams(1.0, 0.4, 1.4, 2), m=4)
    rng = np.random.default_rng(9)
    obs = ObservationSet.at_points(mesh, rng.uniform(0, 1, (7, 2)), rng.standard_normal((7, 2)), 0.2)
    C = spectral_covariance(field)
    ref_mean, ref_cov = gp_condition(C, obs.P.toarray(), obs.Y, 0.2)
    post = gp_posterior_sparse(field, obs)
    assert np.linalg.norm(post.mean - ref_mean) <= 1e-8 * np.linalg.norm(ref_mean)
    assert abs(gp_log_marginal(field, obs) - gp_log_density(C, obs.P.toarray(), obs.Y, 0.2)) <= 1e-8


@pytest.mark.parametrize("nu", [3.5, 2.75])
def test_long_correlation_length(nu):
    # ell spans ~18 mesh cells, so Q_t is badly conditioned
    mesh = uniform_interval(0, 3, 100)
    field = build_field(mesh, MaternParams(1.0, math.sqrt(2 * nu) * (3 / 99) / 0.15, nu, 1), m=4)
    rng = np.random.default_rng(11)
    obs = ObservationSet.at_points(mesh, rng.uniform(0, 3, (12, 1)), rng.standard_normal((12, 3)), 0.1)
    C = spectral_covariance(field)
    ref_mean, ref_cov = gp_condition(C, obs.P.toarray(), obs.Y, 0.1)
    post = gp_posterior_sparse(field, obs)
    assert np.linalg.norm(post.mean - ref_mean) <= 1e-8 * np.linalg.norm(ref_mean)
    var = gp_posterior_variance_at(post, np.arange(field.n))
    assert np.linalg.norm(var - np.diag(ref_cov)) <= 1e-8 * np.linalg.norm(np.diag(ref_cov))
    ref = gp_log_density(C, obs.P.toarray(), obs.Y, 0.1)
    assert abs(gp_log_marginal(field, obs) - ref) <= 1e-8


def test_factor_route_for_many_observations(monkeypatch):
    _, field, obs = problem(nu=2.2, n_y=8, n_o=2, seed=4)
    low_rank = gp_posterior_sparse(field, obs)
    low_rank_var = gp_posterior_variance_at(low_rank, np.arange(field.n))
    low_rank_lp = gp_log_marginal(field, obs)
    monkeypatch.setattr(gp, "LOW_RANK_LIMIT", 0)
    post = gp_posterior_sparse(field, obs)
    assert post.gain is None
    np.testing.assert_allclose(post.mean, low_rank.mean, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(gp_posterior_variance_at(post, np.arange(field.n)), low_rank_var, rtol=1e-8)
    assert abs(gp_log_marginal(field, obs) - low_rank_lp) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_y=st.integers(1, 6))
def test_extra_observation_never_increases_variance(seed, n_y):
    rng = np.random.default_rng(seed)
    mesh = uniform_interval(0, 2, 30)
    field = build_field(mesh, MaternParams(1.0, rng.uniform(0.2, 1.0), 1.5, 1))
    C = field.dense_covariance()
    pts = rng.uniform(0, 2, (n_y + 1, 1))
    Y = rng.standard_normal((n_y + 1, 1))
    fewer = ObservationSet.at_points(mesh, pts[:n_y], Y[:n_y], 0.1)
    more = ObservationSet.at_points(mesh, pts, Y, 0.1)
    v1 = np.diag(gp_posterior_dense(C, fewer)[1])
    v2 = np.diag(gp_posterior_dense(C, more)[1])
    assert np.all(v2 <= v1 + 1e-10)
    s1 = gp_posterior_variance_at(gp_posterior_sparse(field, fewer), np.arange(30))
    s2 = gp_posterior_variance_at(gp_posterior_sparse(field, more), np.arange(30))
    assert np.all(s2 <= s1 + 1e-10)
