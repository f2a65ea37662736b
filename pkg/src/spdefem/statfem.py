"""Statistical finite elements for Poisson-Dirichlet problems.

The forward model is ``A u = M (f̄ + s)`` with a Gaussian source ``s``, and
observations follow ``y_j = P(u + d_j) + e_j`` where the mismatch ``d_j`` and
noise ``e_j`` are independent per reading.  Everything below is phrased in
terms of sparse factors; the dense variants at the bottom of the module exist
to cross-check them on small problems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .gp import DENSE_LIMIT, ObservationSet
from .mesh import CoefficientField, Mesh, assemble_stiffness, lumped_mass
from .spde import GaussianField, MaternParams, build_field
from .sparsela import CholeskyFactor, Symbolic, canonical, cholesky, symmetrize

OBSERVATION_FRACTION = 0.25


class ObservationGuardError(ValueError):
    """Raised when there are too many observation points for the sparse formulation."""


@dataclass(frozen=True, eq=False)
class ForwardModel:
    """Discretized ``-∇·∇u + c u = f̄ + s`` with Dirichlet data.

    Attributes
    ----------
    mesh : Mesh
    A : sparse (n_free, n_free)
        System matrix on the unknowns of the random problem.  Nodes of random
        boundary labels stay unknowns (their rows are not removed).
    mass : ndarray
        Lumped mass of every node.
    source : ndarray
        Nodal coefficients of the deterministic source ``f̄``.
    dirichlet : dict
        Label to prescribed value.
    random_labels : frozenset
        Labels whose constraint is applied to the mean only.
    free : ndarray
        Node indices of the unknowns.
    fixed_values : ndarray
        Value of every node under all constraints, NaN where unconstrained.
    K : sparse (n, n)
        Unconstrained system matrix, kept for the mean solve.
    """

    mesh: Mesh
    A: sp.csr_matrix
    mass: np.ndarray
    source: np.ndarray
    dirichlet: dict
    random_labels: frozenset
    free: np.ndarray
    fixed_values: np.ndarray
    K: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.mesh.n_nodes

    @property
    def n_free(self) -> int:
        return self.free.size

    @cached_property
    def factor(self) -> CholeskyFactor:
        return cholesky(self.A)

    def solve(self, f: np.ndarray) -> np.ndarray:
        """Nodal solution for source coefficients ``f`` under every Dirichlet constraint."""
        f = np.asarray(f, dtype=np.float64)
        if f.shape[0] != self.n:
            raise ValueError(f"source has {f.shape[0]} entries, mesh has {self.n} nodes")
        vals = self.fixed_values
        constrained = ~np.isnan(vals)
        out = np.where(constrained, vals, 0.0)
        if f.ndim == 2:
            out = np.repeat(out[:, None], f.shape[1], axis=1)
        inner = np.flatnonzero(~constrained)
        rhs = (self.mass * f.T).T - self.K @ out
        if not inner.size:
            return out
        if inner.size == self.n_free:
            out[inner] = self.factor.solve(rhs[inner])
        else:
            a = canonical(self.K[inner][:, inner])
            out[inner] = cholesky(a).solve(rhs[inner])
        return out


def _as_nodal(mesh: Mesh, f) -> np.ndarray:
    if callable(f):
        return np.asarray(f(mesh.nodes), dtype=np.float64).reshape(mesh.n_nodes)
    return np.broadcast_to(np.asarray(f, dtype=np.float64), (mesh.n_nodes,)).copy()


def assemble_forward(
    mesh: Mesh,
    dirichlet: Mapping[str, float],
    source=0.0,
    random_labels=(),
    reaction: float = 0.0,
) -> ForwardModel:
    """Assemble the Poisson (or screened Poisson) forward model.

    Parameters
    ----------
    mesh : Mesh
    dirichlet : mapping
        Boundary label to prescribed value.
    source : float, array or callable
        Deterministic source ``f̄``, as a constant, nodal values or a function
        of the node coordinates.
    random_labels : iterable of str
        Labels whose values are uncertain.  They fix the prior mean but the
        corresponding nodes remain unknowns of the random problem.
    reaction : float
        Coefficient ``c`` of a zeroth-order term.

    Raises
    ------
    ValueError
        For unknown labels, or when every node is free and ``reaction`` is zero
        so that the system matrix is singular.
    """
    dirichlet = {str(k): float(v) for k, v in dirichlet.items()}
    random_labels = frozenset(str(r) for r in random_labels)
    for label in set(dirichlet) | random_labels:
        if label not in mesh.boundary:
            raise ValueError(f"boundary label {label!r} not present on the mesh")
    missing = random_labels - set(dirichlet)
    if missing:
        raise ValueError(f"random labels {sorted(missing)} need a Dirichlet value for the mean")
    if reaction < 0:
        raise ValueError("reaction coefficient must be non-negative")
    coeff = CoefficientField.constant(reaction) if reaction > 0 else None
    K = canonical(assemble_stiffness(mesh, coeff))
    vals = np.full(mesh.n_nodes, np.nan)
    fixed = np.zeros(mesh.n_nodes, dtype=bool)
    # random labels first so deterministic values win at shared corners
    for label in sorted(dirichlet, key=lambda s: s not in random_labels):
        idx = mesh.boundary[label]
        vals[idx] = dirichlet[label]
        if label not in random_labels:
            fixed[idx] = True
    free = np.flatnonzero(~fixed)
    if not fixed.any() and reaction == 0.0:
        raise ValueError("no deterministic Dirichlet constraint and no reaction term: singular system")
    A = canonical(K[free][:, free])
    return ForwardModel(mesh, A, lumped_mass(mesh), _as_nodal(mesh, source), dirichlet,
                        random_labels, free, vals, K)


@dataclass(frozen=True, eq=False)
class SolutionPrior:
    """Gaussian prior of the nodal solution ``N(ū, Q_u⁻¹)``.

    ``mean`` covers every node; ``Q_u`` acts on ``forward.free`` only, the other
    nodes carrying their prescribed values with zero variance.
    """

    forward: ForwardModel
    source_field: GaussianField
    mean: np.ndarray

    @cached_property
    def source_precision(self) -> sp.csr_matrix:
        f = self.forward.free
        return canonical(self.source_field.Q_t[f][:, f])

    @cached_property
    def Q_u(self) -> sp.csr_matrix:
        """``Aᵀ M⁻¹ Q_s M⁻¹ A`` restricted to the unknowns."""
        fm = self.forward
        minv_a = canonical(sp.diags(1.0 / fm.mass[fm.free]) @ fm.A)
        return symmetrize(minv_a.T @ self.source_precision @ minv_a)

    @cached_property
    def _source_factor(self) -> CholeskyFactor:
        return cholesky(self.source_precision)

    def logdet_precision(self) -> float:
        fm = self.forward
        return (2.0 * fm.factor.logdet() - 2.0 * np.sum(np.log(fm.mass[fm.free]))
                + self._source_factor.logdet())

    def covariance_apply(self, v: np.ndarray) -> np.ndarray:
        """``Q_u⁻¹ v = A⁻¹ M Q_s⁻¹ M A⁻¹ v`` on the unknowns."""
        fm = self.forward
        m = fm.mass[fm.free]
        m = m if np.ndim(v) == 1 else m[:, None]
        x = fm.factor.solve(v)
        x = self._source_factor.solve(m * x)
        return fm.factor.solve(m * x)

    def variance(self) -> np.ndarray:
        """Prior variance at every node (zero on deterministic boundaries)."""
        return _diag_of(self.covariance_apply, self.forward)

    def dense_covariance(self) -> np.ndarray:
        fm = self.forward
        return self.covariance_apply(np.eye(fm.n_free))


def _diag_of(apply: Callable, fm: ForwardModel, block: int = 256) -> np.ndarray:
    out = np.zeros(fm.n)
    nf = fm.n_free
    for start in range(0, nf, block):
        stop = min(start + block, nf)
        e = np.zeros((nf, stop - start))
        e[np.arange(start, stop), np.arange(stop - start)] = 1.0
        out[fm.free[start:stop]] = np.einsum("ij,ij->j", e, apply(e))
    return out


def forward_prior(fm: ForwardModel, source_field: GaussianField) -> SolutionPrior:
    """Push the source field through the forward model.

    Raises
    ------
    ValueError
        If the field lives on a different number of nodes or has a fractional
        exponent (its precision would not be sparse).
    """
    if source_field.n != fm.n:
        raise ValueError(f"source field has {source_field.n} nodes, forward model has {fm.n}")
    if source_field.is_fractional:
        raise ValueError("the source field needs an integer SPDE exponent")
    return SolutionPrior(fm, source_field, fm.solve(fm.source))


@dataclass(frozen=True, eq=False)
class MismatchField:
    """Model-mismatch field with an integer SPDE exponent."""

    field: GaussianField

    def __post_init__(self):
        if self.field.is_fractional:
            raise ValueError(
                f"mismatch exponent must be an integer, got beta={self.field.params.beta:.6g}")

    @property
    def Q_d(self) -> sp.csr_matrix:
        return self.field.Q_t

    @property
    def n(self) -> int:
        return self.field.n


def mismatch_field(mesh: Mesh, sigma_d: float, ell_d: float, nu_d: float,
                   operator_analysis: Symbolic | None = None) -> MismatchField:
    """Build a mismatch field; ``nu_d/2 + d/4`` must be an integer."""
    beta = nu_d / 2 + mesh.dim_param / 4
    if abs(beta - round(beta)) > 1e-12:
        raise ValueError(f"nu_d={nu_d} gives the fractional exponent {beta:.6g}")
    return MismatchField(build_field(mesh, MaternParams(sigma_d, ell_d, nu_d, mesh.dim_param),
                                     operator_analysis=operator_analysis))


# ---------------------------------------------------------------------------
# conditioning


@dataclass
class Analyses:
    """Orderings reused across objective evaluations with a fixed sparsity pattern."""

    noise: Symbolic | None = None
    posterior: Symbolic | None = None
    operator: Symbolic | None = None


@dataclass(frozen=True, eq=False)
class StatFemPosterior:
    """Posterior of the nodal solution.

    ``factor`` holds the sparse Cholesky factor of ``Q_{u|Y}``.  Products with
    ``Q_{u|Y}⁻¹`` go through the equivalent low-rank update of the prior
    covariance, ``C_u - W S⁻¹ Wᵀ`` with ``W = C_u Pᵀ`` and
    ``S = P C_u Pᵀ + Q_de⁻¹/n_o``.  That route only touches the factors of
    ``A`` and ``Q_s``, whereas ``Q_{u|Y}`` inherits ``cond(A)² cond(Q_s)``
    and loses several digits on fine meshes.

    Attributes
    ----------
    mean : ndarray
        Posterior mean at every node.
    factor : CholeskyFactor
        Factor of ``Q_{u|Y}`` on the unknowns.
    prior : SolutionPrior
    Q_de : ndarray
        Dense ``(P Q_d⁻¹ Pᵀ + σ_e² I)⁻¹``.
    gain : ndarray
        ``W = C_u Pᵀ``, shape ``(n_free, n_y)``.
    innovation : tuple
        Cholesky factor of ``S`` as returned by ``scipy.linalg.cho_factor``.
    """

    mean: np.ndarray
    factor: CholeskyFactor
    prior: SolutionPrior
    Q_de: np.ndarray
    shift: np.ndarray = field(repr=False)
    gain: np.ndarray = field(repr=False)
    innovation: tuple = field(repr=False)
    noise_logdet: float = 0.0

    def covariance_apply(self, v: np.ndarray) -> np.ndarray:
        """``Q_{u|Y}⁻¹ v`` on the unknowns."""
        v = np.asarray(v, dtype=np.float64)
        return (self.prior.covariance_apply(v)
                - self.gain @ scipy.linalg.cho_solve(self.innovation, self.gain.T @ v))

    def variance(self) -> np.ndarray:
        """Posterior variance at every node (zero on deterministic boundaries)."""
        fm = self.prior.forward
        var = self.prior.variance()
        g = self.gain
        var[fm.free] -= np.einsum("ij,ji->i", g, scipy.linalg.cho_solve(self.innovation, g.T))
        return np.maximum(var, 0.0)


def _check(prior: SolutionPrior, mismatch: MismatchField, obs: ObservationSet) -> None:
    n = prior.forward.n
    if mismatch.n != n:
        raise ValueError(f"mismatch field has {mismatch.n} nodes, forward model has {n}")
    if obs.P.shape[1] != n:
        raise ValueError(f"observation matrix has {obs.P.shape[1]} columns, mesh has {n} nodes")
    if obs.n_y > OBSERVATION_FRACTION * n:
        raise ObservationGuardError(
            f"{obs.n_y} observation points exceed n_u/4 = {OBSERVATION_FRACTION * n:g}; "
            "the conditioned precision would no longer be sparse")


def noise_precision(mismatch: MismatchField, P: sp.csr_matrix, sigma_e: float,
                    analyses: Analyses | None = None) -> tuple[np.ndarray, float]:
    """Dense ``Q_de = σ⁻²I - σ⁻²P(σ²Q_d + PᵀP)⁻¹Pᵀ`` and ``log det Q_de⁻¹``."""
    s2 = sigma_e**2
    g = canonical(s2 * mismatch.Q_d + P.T @ P)
    gf = cholesky(g, analyses.noise if analyses else None)
    if analyses is not None:
        analyses.noise = gf.symbolic
    w = gf.solve(P.T.toarray())
    q = (np.eye(P.shape[0]) - P @ w) / s2
    q = 0.5 * (q + q.T)
    logdet_inv = ((P.shape[0] - mismatch.n) * math.log(s2) + gf.logdet()
                  - mismatch.field.logdet_precision())
    return q, logdet_inv


def _condition(prior: SolutionPrior, mismatch: MismatchField, obs: ObservationSet,
               analyses: Analyses | None = None) -> StatFemPosterior:
    _check(prior, mismatch, obs)
    fm = prior.forward
    q_de, noise_logdet = noise_precision(mismatch, obs.P, obs.sigma_e, analyses)
    pr = canonical(obs.P[:, fm.free])
    update = canonical(pr.T @ sp.csr_matrix(q_de) @ pr)
    q_post = symmetrize(prior.Q_u + obs.n_o * update)
    kf = cholesky(q_post, analyses.posterior if analyses else None)
    if analyses is not None:
        analyses.posterior = kf.symbolic
    gain = prior.covariance_apply(pr.T.toarray())
    s_mat = pr @ gain + (mismatch.field.projected_covariance(obs.P)
                         + obs.sigma_e**2 * np.eye(obs.n_y)) / obs.n_o
    innovation = scipy.linalg.cho_factor(0.5 * (s_mat + s_mat.T), lower=True)
    rbar = obs.Y.mean(axis=1) - obs.P @ prior.mean
    shift = gain @ scipy.linalg.cho_solve(innovation, rbar)
    mean = prior.mean.copy()
    mean[fm.free] += shift
    return StatFemPosterior(mean, kf, prior, q_de, shift, gain, innovation, noise_logdet)


def statfem_posterior(prior: SolutionPrior, mismatch: MismatchField, obs: ObservationSet,
                      analyses: Analyses | None = None) -> StatFemPosterior:
    """Condition the solution prior on repeated readings.

    ``Q_{u|Y} = Q_u + n_o Pᵀ Q_de P`` and
    ``ū_{|Y} = ū + Q_{u|Y}⁻¹ Pᵀ Q_de (Σ y_j - n_o P ū)``.

    Raises
    ------
    ObservationGuardError
        If ``n_y > n_u/4``.
    NotPositiveDefiniteError
        If a factorization breaks down.
    """
    return _condition(prior, mismatch, obs, analyses)


def _log_marginal(post: StatFemPosterior, obs: ObservationSet) -> float:
    prior = post.prior
    pr = obs.P[:, prior.forward.free]
    r = obs.Y - (obs.P @ prior.mean)[:, None]
    # the Woodbury form Σ r_jᵀQ_de r_j - δᵀb avoids products with the badly
    # conditioned Q_u
    b = pr.T @ (post.Q_de @ r.sum(axis=1))
    quad = np.einsum("ij,ij->", r, post.Q_de @ r) - post.shift @ b
    # log det Q_{u|Y} - log det Q_u by the determinant lemma on the small
    # innovation matrix; differencing the two sparse log-determinants cancels
    # badly once Q_u is ill-conditioned
    ratio = (obs.n_y * math.log(obs.n_o) + 2.0 * np.sum(np.log(np.diag(post.innovation[0])))
             - post.noise_logdet)
    logdet = obs.n_o * post.noise_logdet + ratio
    n_tot = obs.n_y * obs.n_o
    return float(-0.5 * quad - 0.5 * logdet - 0.5 * n_tot * math.log(2.0 * math.pi))


def observed_prior_covariance(prior: SolutionPrior, P: sp.csr_matrix) -> np.ndarray:
    """Dense ``P Q_u⁻¹ Pᵀ``, from ``n_y`` solves with the prior factors."""
    fm = prior.forward
    pr = canonical(canonical(P)[:, fm.free])
    if pr.nnz == 0:
        return np.zeros((P.shape[0], P.shape[0]))
    k = pr @ prior.covariance_apply(pr.T.toarray())
    return 0.5 * (k + k.T)


def _observation_log_marginal(prior: SolutionPrior, mismatch: MismatchField,
                              obs: ObservationSet, k: np.ndarray) -> float:
    n_y, n_o = obs.n_y, obs.n_o
    c_de = mismatch.field.projected_covariance(obs.P) + obs.sigma_e**2 * np.eye(n_y)
    r = obs.Y - (obs.P @ prior.mean)[:, None]
    rbar = r.mean(axis=1)
    dev = r - rbar[:, None]
    # the mean reading carries u, the scatter about it only mismatch and noise
    cs = scipy.linalg.cho_factor(c_de, lower=True)
    cm = scipy.linalg.cho_factor(k + c_de / n_o, lower=True)
    quad = rbar @ scipy.linalg.cho_solve(cm, rbar)
    quad += np.einsum("ij,ij->", dev, scipy.linalg.cho_solve(cs, dev))
    logdet = (2.0 * np.sum(np.log(np.diag(cm[0])))
              + (n_o - 1) * 2.0 * np.sum(np.log(np.diag(cs[0]))) + n_y * math.log(n_o))
    return float(-0.5 * quad - 0.5 * logdet - 0.5 * n_y * n_o * math.log(2.0 * math.pi))


def statfem_log_marginal(prior: SolutionPrior, mismatch: MismatchField, obs: ObservationSet,
                         analyses: Analyses | None = None, method: str = "precision",
                         observed_prior: np.ndarray | None = None) -> float:
    """Log density of all readings with ``u`` and the mismatch integrated out.

    Parameters
    ----------
    method : {"precision", "observation"}
        ``"precision"`` conditions the sparse precision of ``u``.
        ``"observation"`` works with ``n_y × n_y`` covariances and never
        factorizes ``Q_u``, which is far better conditioned on fine meshes.
    observed_prior : ndarray, optional
        Precomputed :func:`observed_prior_covariance` for the observation method.
    """
    if method == "precision":
        return _log_marginal(_condition(prior, mismatch, obs, analyses), obs)
    if method != "observation":
        raise ValueError(f"unknown method {method!r}")
    _check(prior, mismatch, obs)
    k = observed_prior_covariance(prior, obs.P) if observed_prior is None else observed_prior
    return _observation_log_marginal(prior, mismatch, obs, k)


def posterior_true_response(post: StatFemPosterior, mismatch: MismatchField,
                            P: sp.csr_matrix) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the true response at the rows of ``P``.

    The covariance is ``P Q_{u|Y}⁻¹ Pᵀ + P Q_d⁻¹ Pᵀ``, assembled from column solves.
    """
    P = canonical(P)
    fm = post.prior.forward
    pr = P[:, fm.free]
    prt = pr.T.toarray()
    cov = pr @ post.covariance_apply(prt) if prt.size else np.zeros((P.shape[0], P.shape[0]))
    cov = cov + P @ mismatch.field.covariance_apply(P.T.toarray())
    return P @ post.mean, 0.5 * (cov + cov.T)


def posterior_true_variance(post: StatFemPosterior, mismatch: MismatchField) -> np.ndarray:
    """Pointwise variance of the true response at every node."""
    fm = post.prior.forward
    var = post.variance()
    n = fm.n
    block = 256
    for start in range(0, n, block):
        stop = min(start + block, n)
        e = np.zeros((n, stop - start))
        e[np.arange(start, stop), np.arange(stop - start)] = 1.0
        var[start:stop] += np.einsum("ij,ij->j", e, mismatch.field.covariance_apply(e))
    return var


def statfem_objective(prior: SolutionPrior, obs: ObservationSet, nu_d: float,
                      fixed: Mapping[str, float] | None = None,
                      method: str = "observation") -> Callable[[Mapping[str, float]], float]:
    """Log marginal likelihood as a function of ``sigma_d``, ``ell_d`` and ``sigma_e``.

    Keys missing from the argument are taken from ``fixed``.  Orderings, and for
    the observation method the projected prior covariance, are shared between
    calls.
    """
    fixed = dict(fixed or {})
    analyses = Analyses()
    mesh = prior.forward.mesh
    k = observed_prior_covariance(prior, obs.P) if method == "observation" else None

    def objective(params: Mapping[str, float]) -> float:
        p = {**fixed, **params}
        mm = mismatch_field(mesh, p["sigma_d"], p["ell_d"], nu_d, analyses.operator)
        o = obs if "sigma_e" not in p else obs.with_noise(p["sigma_e"])
        value = statfem_log_marginal(prior, mm, o, analyses, method, k)
        if analyses.operator is None:
            analyses.operator = mm.field._operator_factor.symbolic
        return value

    return objective


# ---------------------------------------------------------------------------
# dense reference formulation


def _dense_parts(prior: SolutionPrior, mismatch: MismatchField, obs: ObservationSet):
    fm = prior.forward
    if fm.n > DENSE_LIMIT:
        raise ValueError(f"dense formulation limited to {DENSE_LIMIT} nodes")
    minv_a = np.diag(1.0 / fm.mass[fm.free]) @ fm.A.toarray()
    c_u = np.linalg.inv(minv_a) @ np.linalg.inv(prior.source_precision.toarray()) @ np.linalg.inv(minv_a).T
    c_u = 0.5 * (c_u + c_u.T)
    c_d = np.linalg.inv(mismatch.Q_d.toarray())
    p = obs.P.toarray()
    pr = p[:, fm.free]
    c_de = p @ c_d @ p.T + obs.sigma_e**2 * np.eye(obs.n_y)
    return c_u, c_d, p, pr, c_de


def _stacked_covariance(c_u, pr, c_de, n_o):
    k = pr @ c_u @ pr.T
    return np.kron(np.ones((n_o, n_o)), k) + np.kron(np.eye(n_o), c_de)


def statfem_posterior_dense(prior: SolutionPrior, mismatch: MismatchField,
                            obs: ObservationSet) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean (every node) and covariance (unknowns) by joint conditioning."""
    c_u, _, p, pr, c_de = _dense_parts(prior, mismatch, obs)
    s = _stacked_covariance(c_u, pr, c_de, obs.n_o)
    cross = np.tile(c_u @ pr.T, (1, obs.n_o))
    r = (obs.Y - (p @ prior.mean)[:, None]).T.ravel()
    cf = scipy.linalg.cho_factor(s)
    mean = prior.mean.copy()
    mean[prior.forward.free] += cross @ scipy.linalg.cho_solve(cf, r)
    cov = c_u - cross @ scipy.linalg.cho_solve(cf, cross.T)
    return mean, 0.5 * (cov + cov.T)


def statfem_log_marginal_dense(prior: SolutionPrior, mismatch: MismatchField,
                               obs: ObservationSet) -> float:
    """Multivariate normal log density of the stacked readings."""
    c_u, _, p, pr, c_de = _dense_parts(prior, mismatch, obs)
    s = _stacked_covariance(c_u, pr, c_de, obs.n_o)
    r = (obs.Y - (p @ prior.mean)[:, None]).T.ravel()
    cf = scipy.linalg.cho_factor(s)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(-0.5 * r @ scipy.linalg.cho_solve(cf, r) - 0.5 * logdet
                 - 0.5 * r.size * math.log(2.0 * math.pi))


def true_response_dense(prior: SolutionPrior, mismatch: MismatchField, obs: ObservationSet,
                        P: sp.csr_matrix) -> tuple[np.ndarray, np.ndarray]:
    mean, cov_u = statfem_posterior_dense(prior, mismatch, obs)
    _, c_d, _, _, _ = _dense_parts(prior, mismatch, obs)
    p = P.toarray()
    pr = p[:, prior.forward.free]
    return p @ mean, pr @ cov_u @ pr.T + p @ c_d @ p.T
