import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import spectral_covariance, statfem_blocks, statfem_condition

from spdefem.gp import ObservationSet
from spdefem.mesh import rectangle_mesh, uniform_interval
from spdefem.spde import MaternParams, build_field
from spdefem.statfem import (
    Analyses,
    MismatchField,
    ObservationGuardError,
    assemble_forward,
    forward_prior,
    mismatch_field,
    noise_precision,
    observed_prior_covariance,
    posterior_true_response,
    posterior_true_variance,
    statfem_log_marginal,
    statfem_log_marginal_dense,
    statfem_objective,
    statfem_posterior,
    statfem_posterior_dense,
    true_response_dense,
)


def line_prior(n=25, sigma_s=0.5, source=2.0, dirichlet=None, random_labels=()):
    mesh = uniform_interval(0, 1, n)
    fm = assemble_forward(mesh, dirichlet or {"left": 0.0, "right": 0.0}, source, random_labels)
    return forward_prior(fm, build_field(mesh, MaternParams(sigma_s, 0.3, 1.5, 1)))


def readings(prior, mm, n_y, n_o, sigma_e, seed):
    """Readings drawn from the model itself."""
    rng = np.random.default_rng(seed)
    mesh = prior.forward.mesh
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    pts = rng.uniform(lo, hi, (n_y, mesh.nodes.shape[1]))
    P = ObservationSet.at_points(mesh, pts, np.zeros((n_y, 1)), sigma_e).P.toarray()
    c_u = prior.dense_covariance()
    u = prior.mean.copy()
    u[prior.forward.free] += np.linalg.cholesky(c_u + 1e-14 * np.eye(len(c_u))) @ rng.standard_normal(len(c_u))
    c_d = spectral_covariance(mm.field)
    ld = np.linalg.cholesky(c_d + 1e-14 * np.eye(len(c_d)))
    Y = np.column_stack([P @ (u + ld @ rng.standard_normal(len(u))) + sigma_e * rng.standard_normal(n_y)
                         for _ in range(n_o)])
    return ObservationSet.at_points(mesh, pts, Y, sigma_e)


# ---------------------------------------------------------------------------
# forward model and prior


@pytest.mark.parametrize("n", [11, 41])
def test_poisson_mean_matches_parabola(n):
    prior = line_prior(n)
    x = prior.forward.mesh.nodes[:, 0]
    h = 1.0 / (n - 1)
    assert np.abs(prior.mean - x * (1 - x)).max() <= h**2


def test_zero_source_gives_zero_mean():
    prior = line_prior(source=0.0)
    np.testing.assert_allclose(prior.mean, 0.0, atol=1e-15)


def test_prior_mean_is_forward_solve():
    mesh = rectangle_mesh(7, 7)
    fm = assemble_forward(mesh, {"left": 1.0, "right": -0.5}, lambda x: 1 + x[:, 0] * x[:, 1])
    prior = forward_prior(fm, build_field(mesh, MaternParams(0.2, 0.3, 1.0, 2)))
    u = np.array(fm.fixed_values)
    fixed = np.setdiff1d(np.arange(mesh.n_nodes), fm.free)
    K = fm.K.toarray()
    rhs = fm.mass * fm.source
    free = fm.free
    u[free] = np.linalg.solve(K[np.ix_(free, free)], rhs[free] - K[np.ix_(free, fixed)] @ u[fixed])
    np.testing.assert_allclose(prior.mean, u, rtol=1e-11, atol=1e-13)


def test_dense_covariance_matches_oracle():
    prior = line_prior(20)
    c_u, _ = statfem_blocks(prior, None, np.zeros((0, 20)))
    np.testing.assert_allclose(prior.dense_covariance(), c_u, rtol=1e-9, atol=1e-15)
    var = prior.variance()
    assert var[0] == 0 and var[-1] == 0
    np.testing.assert_allclose(var[prior.forward.free], np.diag(c_u), rtol=1e-9)


def test_random_boundary_has_variance():
    prior = line_prior(15, random_labels=("right",), dirichlet={"left": 0.0, "right": 1.0})
    assert prior.mean[-1] == pytest.approx(1.0)
    var = prior.variance()
    assert var[0] == 0.0
    assert var[-1] > 0.0


def test_variance_vanishes_with_source_scale():
    v1 = line_prior(sigma_s=1.0).variance()
    v2 = line_prior(sigma_s=1e-4).variance()
    np.testing.assert_allclose(v2, 1e-8 * v1, rtol=1e-8)


def test_forward_model_errors():
    mesh = uniform_interval(0, 1, 10)
    with pytest.raises(ValueError, match="not present"):
        assemble_forward(mesh, {"top": 0.0})
    with pytest.raises(ValueError, match="need a Dirichlet"):
        assemble_forward(mesh, {"left": 0.0}, random_labels=("right",))
    with pytest.raises(ValueError, match="singular"):
        assemble_forward(mesh, {})
    assert assemble_forward(mesh, {}, reaction=1.0).n_free == 10
    fm = assemble_forward(mesh, {"left": 0.0})
    with pytest.raises(ValueError, match="integer"):
        forward_prior(fm, build_field(mesh, MaternParams(1.0, 0.3, 2.0, 1)))
    with pytest.raises(ValueError, match="nodes"):
        forward_prior(fm, build_field(uniform_interval(0, 1, 11), MaternParams(1.0, 0.3, 1.5, 1)))


def test_fractional_mismatch_is_rejected():
    mesh = uniform_interval(0, 1, 10)
    with pytest.raises(ValueError, match="fractional"):
        mismatch_field(mesh, 0.1, 0.2, 2.0)
    with pytest.raises(ValueError, match="integer"):
        MismatchField(build_field(mesh, MaternParams(0.1, 0.2, 2.0, 1)))


# ---------------------------------------------------------------------------
# conditioning


@pytest.mark.parametrize("n_o", [1, 2, 4])
def test_posterior_matches_joint_conditioning(n_o):
    prior = line_prior(25)
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.2, 1.5)
    obs = readings(prior, mm, 5, n_o, 0.02, seed=n_o)
    mean, cov, logp = statfem_condition(prior, spectral_covariance(mm.field), obs.P.toarray(), obs.Y, 0.02)
    post = statfem_posterior(prior, mm, obs)
    np.testing.assert_allclose(post.mean, mean, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(post.variance()[prior.forward.free], np.diag(cov), rtol=1e-8)
    assert abs(statfem_log_marginal(prior, mm, obs) - logp) <= 1e-8
    assert abs(statfem_log_marginal(prior, mm, obs, method="observation") - logp) <= 1e-8


@pytest.mark.parametrize("nu_d", [1.5, 3.5])
def test_fine_mesh_accuracy(nu_d):
    # cond(Q_u) is about 1e11 here; the posterior must not inherit it
    mesh = uniform_interval(0, 1, 100)
    h = 1 / 99
    fm = assemble_forward(mesh, {"left": 0.0, "right": 0.0}, 1.0)
    prior = forward_prior(fm, build_field(mesh, MaternParams(1.0, 8 * h, 1.5, 1)))
    assert np.linalg.cond(prior.Q_u.toarray()) > 1e10
    mm = mismatch_field(mesh, 0.1, 8 * h, nu_d)
    obs = readings(prior, mm, 5, 3, 0.05, seed=4)
    mean, cov, logp = statfem_condition(prior, spectral_covariance(mm.field), obs.P.toarray(), obs.Y, 0.05)
    post = statfem_posterior(prior, mm, obs)
    np.testing.assert_allclose(post.mean, mean, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(post.covariance_apply(np.eye(fm.n_free)), cov, rtol=1e-9, atol=1e-12 * np.abs(cov).max())
    for method in ("precision", "observation"):
        assert abs(statfem_log_marginal(prior, mm, obs, method=method) - logp) <= 1e-8


def test_module_dense_variants_agree_with_oracle():
    prior = line_prior(21, random_labels=("left",), dirichlet={"left": 0.2, "right": 0.0})
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.2, 3.5)
    obs = readings(prior, mm, 4, 3, 0.03, seed=11)
    mean, cov, logp = statfem_condition(prior, spectral_covariance(mm.field), obs.P.toarray(), obs.Y, 0.03)
    dm, dc = statfem_posterior_dense(prior, mm, obs)
    np.testing.assert_allclose(dm, mean, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(dc, cov, rtol=1e-7, atol=1e-12)
    assert abs(statfem_log_marginal_dense(prior, mm, obs) - logp) <= 1e-8


def test_two_dimensional_conditioning():
    mesh = rectangle_mesh(7, 7)
    fm = assemble_forward(mesh, {"left": 0.0, "bottom": 0.5, "top": 0.0}, 1.0, ("top",))
    prior = forward_prior(fm, build_field(mesh, MaternParams(0.5, 0.3, 1.0, 2)))
    mm = mismatch_field(mesh, 0.05, 0.3, 1.0)
    obs = readings(prior, mm, 8, 2, 0.01, seed=3)
    mean, cov, logp = statfem_condition(prior, spectral_covariance(mm.field), obs.P.toarray(), obs.Y, 0.01)
    post = statfem_posterior(prior, mm, obs)
    np.testing.assert_allclose(post.mean, mean, rtol=1e-8, atol=1e-10)
    assert abs(statfem_log_marginal(prior, mm, obs) - logp) <= 1e-8


def test_readings_at_prior_mean_leave_it_unchanged():
    prior = line_prior(25)
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.2, 1.5)
    pts = np.linspace(0.1, 0.9, 5)[:, None]
    probe = ObservationSet.at_points(prior.forward.mesh, pts, np.zeros((5, 1)), 0.01)
    y = probe.P @ prior.mean
    obs = ObservationSet.at_points(prior.forward.mesh, pts, np.column_stack([y, y, y]), 0.01)
    post = statfem_posterior(prior, mm, obs)
    np.testing.assert_allclose(post.mean, prior.mean, atol=1e-12)
    assert np.all(post.variance() <= prior.variance() + 1e-15)


def test_tiny_log_marginal():
    mesh = uniform_interval(0, 1, 8)
    fm = assemble_forward(mesh, {"left": 0.0, "right": 0.0}, 1.0)
    prior = forward_prior(fm, build_field(mesh, MaternParams(0.3, 0.4, 1.5, 1)))
    assert fm.n_free == 6
    mm = mismatch_field(mesh, 0.02, 0.3, 1.5)
    obs = ObservationSet.at_points(mesh, [[0.4], [0.65]], [[0.1, 0.13], [0.12, 0.09]], 0.01)
    _, _, logp = statfem_condition(prior, spectral_covariance(mm.field), obs.P.toarray(), obs.Y, 0.01)
    assert abs(statfem_log_marginal(prior, mm, obs) - logp) <= 1e-10


def test_log_marginal_drops_for_shifted_data():
    prior = line_prior(25)
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.2, 1.5)
    obs = readings(prior, mm, 5, 2, 0.02, seed=7)
    shifted = ObservationSet(obs.points, obs.P, obs.Y + 1.0, obs.sigma_e)
    for method in ("precision", "observation"):
        assert (statfem_log_marginal(prior, mm, shifted, method=method)
                < statfem_log_marginal(prior, mm, obs, method=method))


def test_noise_precision_inverts_observed_covariance():
    mesh = uniform_interval(0, 1, 30)
    mm = mismatch_field(mesh, 0.1, 0.2, 1.5)
    P = ObservationSet.at_points(mesh, [[0.1], [0.33], [0.8]], np.zeros((3, 1)), 0.05).P
    q, logdet_inv = noise_precision(mm, P, 0.05)
    c = P.toarray() @ spectral_covariance(mm.field) @ P.toarray().T + 0.0025 * np.eye(3)
    np.testing.assert_allclose(q @ c, np.eye(3), atol=1e-9)
    assert logdet_inv == pytest.approx(np.linalg.slogdet(c)[1], abs=1e-9)


def test_observed_prior_covariance():
    prior = line_prior(20)
    P = ObservationSet.at_points(prior.forward.mesh, [[0.0], [0.5], [0.71]], np.zeros((3, 1)), 0.1).P
    c_u, pr = statfem_blocks(prior, None, P.toarray())
    np.testing.assert_allclose(observed_prior_covariance(prior, P), pr @ c_u @ pr.T, rtol=1e-9, atol=1e-15)
    # a reading exactly on a deterministic boundary carries no prior uncertainty
    on_boundary = sp.csr_matrix(([1.0], ([0], [0])), shape=(1, 20))
    np.testing.assert_array_equal(observed_prior_covariance(prior, on_boundary), 0.0)


def test_guard_on_observation_count():
    prior = line_prior(20)
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.2, 1.5)
    ok = ObservationSet.at_points(prior.forward.mesh, np.linspace(0, 1, 5)[:, None], np.zeros((5, 1)), 0.1)
    statfem_posterior(prior, mm, ok)
    bad = ObservationSet.at_points(prior.forward.mesh, np.linspace(0, 1, 6)[:, None], np.zeros((6, 1)), 0.1)
    with pytest.raises(ObservationGuardError):
        statfem_posterior(prior, mm, bad)
    with pytest.raises(ObservationGuardError):
        statfem_log_marginal(prior, mm, bad, method="observation")


def test_argument_checks():
    prior = line_prior(20)
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.2, 1.5)
    obs = ObservationSet.at_points(prior.forward.mesh, [[0.5]], [[0.2]], 0.1)
    with pytest.raises(ValueError, match="method"):
        statfem_log_marginal(prior, mm, obs, method="dense")
    with pytest.raises(ValueError, match="nodes"):
        statfem_posterior(prior, mismatch_field(uniform_interval(0, 1, 21), 0.05, 0.2, 1.5), obs)


# ---------------------------------------------------------------------------
# true response


def test_true_response_matches_oracle():
    prior = line_prior(25)
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.2, 1.5)
    obs = readings(prior, mm, 5, 2, 0.02, seed=5)
    post = statfem_posterior(prior, mm, obs)
    P = ObservationSet.at_points(prior.forward.mesh, [[0.05], [0.5], [0.93]], np.zeros((3, 1)), 1.0).P
    mean_u, cov_u, _ = statfem_condition(prior, spectral_covariance(mm.field), obs.P.toarray(), obs.Y, 0.02)
    p = P.toarray()
    pr = p[:, prior.forward.free]
    ref_cov = pr @ cov_u @ pr.T + p @ spectral_covariance(mm.field) @ p.T
    mean, cov = posterior_true_response(post, mm, P)
    np.testing.assert_allclose(mean, p @ mean_u, rtol=1e-8)
    np.testing.assert_allclose(cov, ref_cov, rtol=1e-8)
    dm, dc = true_response_dense(prior, mm, obs, P)
    np.testing.assert_allclose(dc, ref_cov, rtol=1e-7)

    var = posterior_true_variance(post, mm)
    assert np.all(var >= post.variance())
    full = np.eye(prior.forward.n)
    np.testing.assert_allclose(var, np.diag(posterior_true_response(post, mm, sp.csr_matrix(full))[1]),
                               rtol=1e-9)


def test_true_response_without_mismatch():
    prior = line_prior(25)
    mm = mismatch_field(prior.forward.mesh, 1e-7, 0.2, 1.5)
    obs = readings(prior, mm, 5, 2, 0.02, seed=8)
    post = statfem_posterior(prior, mm, obs)
    var = posterior_true_variance(post, mm)
    # only the σ_d² mismatch variance remains on top of the posterior of u
    np.testing.assert_allclose(var, post.variance(), rtol=1e-6, atol=1e-12)


# ---------------------------------------------------------------------------
# objective


@pytest.mark.parametrize("method", ["precision", "observation"])
def test_objective_reuses_orderings(method):
    prior = line_prior(25)
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.2, 1.5)
    obs = readings(prior, mm, 5, 3, 0.02, seed=9)
    objective = statfem_objective(prior, obs, 1.5, fixed={"sigma_e": 0.02}, method=method)
    for sd, ld in ((0.05, 0.2), (0.1, 0.5), (0.05, 0.2)):
        expected = statfem_log_marginal(prior, mismatch_field(prior.forward.mesh, sd, ld, 1.5), obs)
        assert objective({"sigma_d": sd, "ell_d": ld}) == pytest.approx(expected, abs=1e-8)


def test_analyses_are_filled():
    prior = line_prior(25)
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.2, 1.5)
    obs = readings(prior, mm, 5, 1, 0.02, seed=1)
    an = Analyses()
    a = statfem_log_marginal(prior, mm, obs, an)
    assert an.noise is not None and an.posterior is not None
    assert statfem_log_marginal(prior, mm, obs, an) == pytest.approx(a, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_y=st.integers(1, 5), n_o=st.integers(1, 3),
       sigma_e=st.floats(0.005, 0.2))
def test_sparse_and_observation_routes_agree(seed, n_y, n_o, sigma_e):
    prior = line_prior(21)
    mm = mismatch_field(prior.forward.mesh, 0.05, 0.25, 1.5)
    obs = readings(prior, mm, n_y, n_o, sigma_e, seed)
    a = statfem_log_marginal(prior, mm, obs)
    b = statfem_log_marginal(prior, mm, obs, method="observation")
    assert abs(a - b) <= 1e-8 * max(1.0, abs(a))
