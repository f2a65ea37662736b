"""Gaussian-process regression with SPDE priors.

Two formulations are provided: a dense covariance one, which serves as a
reference on small problems, and a sparse precision one that only touches
sparse factorizations and operator products.

The sparse path factorizes ``K = Q_t + (n_o/σ_e²) F_rᵀPᵀPF_r``; the posterior
covariance of the auxiliary vector is ``K⁻¹``, equivalently
``σ_e² (σ_e² Q_t + n_o F_rᵀPᵀPF_r)⁻¹``.

``Q_t`` behaves like ``(M⁻¹L)^(2β)`` and is very badly conditioned once the
correlation length spans many elements, so solves with ``K`` lose digits.  Up
to :data:`LOW_RANK_LIMIT` observation points the products with ``K⁻¹`` are
therefore evaluated as the low-rank update
``K⁻¹ = Q_t⁻¹ - W S⁻¹ Wᵀ`` with ``B = PF_r``, ``W = Q_t⁻¹Bᵀ`` and
``S = BW + (σ_e²/n_o) I``, where ``Q_t⁻¹`` is applied through solves with the
well-conditioned operator factors.  Beyond that the factor of ``K`` is used.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .mesh import Mesh, observation_matrix
from .spde import GaussianField, MaternParams, build_field
from .sparsela import CholeskyFactor, canonical, cholesky

MIN_NOISE = 1e-12
DENSE_LIMIT = 500
LOW_RANK_LIMIT = 2000


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Readings at fixed points.

    Attributes
    ----------
    points : (n_y, dim) array
    P : sparse (n_y, n_u) observation matrix
    Y : (n_y, n_o) array, one column per repeated reading
    sigma_e : float
        Noise standard deviation.
    """

    points: np.ndarray
    P: sp.csr_matrix
    Y: np.ndarray
    sigma_e: float

    def __post_init__(self):
        y = np.asarray(self.Y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "Y", y)
        object.__setattr__(self, "P", canonical(self.P))
        if y.shape[0] != self.P.shape[0]:
            raise ValueError(f"{y.shape[0]} reading rows for {self.P.shape[0]} observation points")
        if y.shape[1] < 1 and y.shape[0] > 0:
            raise ValueError("at least one reading is required")
        if not self.sigma_e >= MIN_NOISE:
            raise ValueError(f"noise standard deviation must be at least {MIN_NOISE}")

    @classmethod
    def at_points(cls, mesh: Mesh, points, Y, sigma_e: float) -> "ObservationSet":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts, observation_matrix(mesh, pts), Y, sigma_e)

    @property
    def n_y(self) -> int:
        return self.P.shape[0]

    @property
    def n_o(self) -> int:
        return self.Y.shape[1]

    def with_noise(self, sigma_e: float) -> "ObservationSet":
        return ObservationSet(self.points, self.P, self.Y, sigma_e)


def read_observations(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a CSV with header ``x1[,x2[,x3]],y1[,y2,...]``.

    Returns
    -------
    points : (n_y, dim) array
    Y : (n_y, n_o) array
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty observation file")
    header = [h.strip() for h in rows[0]]
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y")]
    if not xcols or not ycols or len(xcols) > 3 or len(xcols) + len(ycols) != len(header):
        raise ValueError(f"{path}: header must be x1[,x2[,x3]],y1[,y2,...]")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
        try:
            data.append([float(c) for c in row])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from None
    arr = np.array(data, dtype=np.float64).reshape(-1, len(header))
    return arr[:, xcols], arr[:, ycols]


def write_observations(path: str | Path, points: np.ndarray, Y: np.ndarray) -> None:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 1 and points.shape[1] != 1 and Y.shape[0] != 1:
        points = points.T
    Y = np.asarray(Y, dtype=np.float64).reshape(points.shape[0], -1)
    header = [f"x{i + 1}" for i in range(points.shape[1])] + [f"y{j + 1}" for j in range(Y.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p, y in zip(points, Y):
            w.writerow([f"{v:.17g}" for v in np.concatenate([p, y])])


# ---------------------------------------------------------------------------
# dense reference formulation


def _stacked(obs: ObservationSet) -> tuple[np.ndarray, np.ndarray]:
    p = obs.P.toarray()
    return np.vstack([p] * obs.n_o), obs.Y.T.ravel()


def gp_posterior_dense(C_s: np.ndarray, obs: ObservationSet) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance by conditioning a dense joint Gaussian.

    Repeated readings are handled by stacking them into one long observation
    vector.
    """
    C_s = np.asarray(C_s, dtype=np.float64)
    if C_s.shape[0] > DENSE_LIMIT:
        raise ValueError(f"dense formulation limited to {DENSE_LIMIT} nodes")
    if obs.n_y == 0:
        return np.zeros(C_s.shape[0]), C_s.copy()
    p, y = _stacked(obs)
    s = p @ C_s @ p.T + obs.sigma_e**2 * np.eye(p.shape[0])
    cf = scipy.linalg.cho_factor(s)
    cp = C_s @ p.T
    mean = cp @ scipy.linalg.cho_solve(cf, y)
    cov = C_s - cp @ scipy.linalg.cho_solve(cf, cp.T)
    return mean, 0.5 * (cov + cov.T)


def gp_log_marginal_dense(C_s: np.ndarray, obs: ObservationSet) -> float:
    """Log density of the stacked readings under ``N(0, P C Pᵀ + σ_e² I)``."""
    if C_s.shape[0] > DENSE_LIMIT:
        raise ValueError(f"dense formulation limited to {DENSE_LIMIT} nodes")
    p, y = _stacked(obs)
    s = p @ C_s @ p.T + obs.sigma_e**2 * np.eye(p.shape[0])
    cf = scipy.linalg.cho_factor(s)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    quad = y @ scipy.linalg.cho_solve(cf, y)
    return float(-0.5 * quad - 0.5 * logdet - 0.5 * y.size * math.log(2.0 * math.pi))


# ---------------------------------------------------------------------------
# sparse precision formulation


@dataclass(frozen=True, eq=False)
class PosteriorField:
    """Posterior of the nodal values.

    Attributes
    ----------
    mean : array
        Posterior mean of the nodal values.
    factor : CholeskyFactor
        Factor of ``K = Q_t + (n_o/σ_e²) F_rᵀPᵀPF_r``.
    field : GaussianField
        Prior field, supplying ``F_r``.
    sigma_e : float
    mean_aux : array
        Posterior mean of the auxiliary vector.
    gain, innovation : array and Cholesky factor, or None
        ``W = Q_t⁻¹Bᵀ`` and the factor of ``S`` when ``K⁻¹`` is applied as a
        low-rank update; None when the factor of ``K`` is used instead.
    """

    mean: np.ndarray
    factor: CholeskyFactor
    field: GaussianField
    sigma_e: float
    mean_aux: np.ndarray
    gain: np.ndarray | None = None
    innovation: tuple | None = None

    def aux_covariance_apply(self, u: np.ndarray) -> np.ndarray:
        """``K⁻¹ u``."""
        if self.gain is None:
            return self.factor.solve(u)
        return (self.field.aux_covariance_apply(u)
                - self.gain @ scipy.linalg.cho_solve(self.innovation, self.gain.T @ u))

    def covariance_apply(self, v: np.ndarray) -> np.ndarray:
        return self.field.apply_fr(self.aux_covariance_apply(self.field.apply_frt(v)))


def observed_operator(field: GaussianField, P: sp.csr_matrix) -> sp.csr_matrix:
    """Sparse ``P F_r``."""
    P = canonical(P)
    if P.shape[1] != field.n:
        raise ValueError(f"observation matrix has {P.shape[1]} columns, field has {field.n} nodes")
    if field.F_r is None:
        return P
    out = P
    for f in field.F_r.factors:
        out = canonical(out @ f)
    return out * field.F_r.scale


def _condition(field: GaussianField, obs: ObservationSet, analysis=None, n_o=None):
    pf = observed_operator(field, obs.P)
    s2 = obs.sigma_e**2
    n_o = obs.n_o if n_o is None else n_o
    k = canonical(field.Q_t + (n_o / s2) * (pf.T @ pf))
    kf = cholesky(k, analysis)
    b = pf.T @ obs.Y.sum(axis=1)
    return kf, b, pf


def _low_rank(obs: ObservationSet) -> bool:
    return 0 < obs.n_y <= LOW_RANK_LIMIT


def _innovation(field: GaussianField, pf: sp.csr_matrix, s2: float, n_o: int):
    """``W = Q_t⁻¹Bᵀ`` and the Cholesky factor of ``S = BW + (σ_e²/n_o) I``."""
    gain = field.aux_covariance_apply(pf.T.toarray())
    s = pf @ gain + (s2 / n_o) * np.eye(pf.shape[0])
    return gain, scipy.linalg.cho_factor(0.5 * (s + s.T), lower=True)


def gp_posterior_sparse(field: GaussianField, obs: ObservationSet) -> PosteriorField:
    """Posterior of the nodal values from sparse factors and operator solves."""
    kf, b, pf = _condition(field, obs)
    if not _low_rank(obs):
        t = kf.solve(b) / obs.sigma_e**2
        return PosteriorField(field.apply_fr(t), kf, field, obs.sigma_e, t)
    gain, innovation = _innovation(field, pf, obs.sigma_e**2, obs.n_o)
    t = gain @ scipy.linalg.cho_solve(innovation, obs.Y.mean(axis=1))
    return PosteriorField(field.apply_fr(t), kf, field, obs.sigma_e, t, gain, innovation)


def gp_posterior_variance_at(post: PosteriorField, indices, block: int = 256) -> np.ndarray:
    """Posterior variances at the given node indices, ``block`` columns at a time."""
    idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    n = post.field.n
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("node index out of range")
    out = np.empty(idx.size)
    for start in range(0, idx.size, block):
        part = idx[start:start + block]
        e = np.zeros((n, part.size))
        e[part, np.arange(part.size)] = 1.0
        u = post.field.apply_frt(e)
        if post.gain is None:
            var = np.einsum("ij,ij->j", u, post.factor.solve(u))
        else:
            z = post.field.aux_whiten(u)
            g = post.gain.T @ u
            var = (np.einsum("ij,ij->j", z, z)
                   - np.einsum("ij,ij->j", g, scipy.linalg.cho_solve(post.innovation, g)))
        out[start:start + part.size] = var
    return np.maximum(out, 0.0)


def gp_log_marginal(field: GaussianField, obs: ObservationSet, readings: str = "shared",
                    analysis=None, method: str = "precision") -> float:
    """Log marginal likelihood of all readings.

    Parameters
    ----------
    field : GaussianField
    obs : ObservationSet
    readings : {"shared", "independent"}
        ``"shared"``: the columns of ``Y`` are noisy readings of one field
        realization.  ``"independent"``: every column comes from its own
        realization, so the result is the sum of single-reading likelihoods.
    analysis : Symbolic, optional
        Ordering reused for the factorization of ``K``.
    method : {"precision", "observation"}
        ``"precision"`` conditions the auxiliary vector, with ``K⁻¹`` applied
        as described in the module notes.  ``"observation"`` only forms
        ``P C Pᵀ`` through half the operator solves and works with dense
        ``n_y × n_y`` matrices; it is the cheaper of the two for a likelihood
        alone.

    Notes
    -----
    The quadratic form is evaluated as ``Σ_j ‖y_j - PF_r t̄‖²/σ_e² + t̄ᵀQ_t t̄``
    with ``t̄`` the posterior mean of the auxiliary vector; this equals
    ``yᵀ(P C Pᵀ + σ_e²I)⁻¹y`` without the cancellation of the Woodbury form.
    The determinant lemma gives
    ``log det(P C Pᵀ + σ_e²I) = n_o n_y log σ_e² + log det K - log det Q_t``,
    and ``log det K - log det Q_t = n_y log(n_o/σ_e²) + log det S``.
    """
    if readings not in ("shared", "independent"):
        raise ValueError(f"unknown readings mode {readings!r}")
    if method == "observation":
        return _observation_log_marginal(field, obs, readings == "shared")
    if method != "precision":
        raise ValueError(f"unknown method {method!r}")
    shared = readings == "shared"
    n_o = obs.n_o if shared else 1
    s2 = obs.sigma_e**2
    n_tot = obs.n_y * obs.n_o
    # with readings sharing the field the statistic is the mean reading
    rhs = obs.Y.mean(axis=1) if shared else obs.Y
    if _low_rank(obs):
        pf = observed_operator(field, obs.P)
        gain, innovation = _innovation(field, pf, s2, n_o)
        a = scipy.linalg.cho_solve(innovation, rhs)
        fitted = pf @ (gain @ a)
        # t̄ᵀQ_t t̄ = aᵀ B t̄ because Q_t t̄ = Bᵀa
        prior_term = np.sum(a * fitted)
        ratio = obs.n_y * math.log(n_o / s2) + 2.0 * np.sum(np.log(np.diag(innovation[0])))
    else:
        kf, _, pf = _condition(field, obs, analysis, n_o)
        t = kf.solve(pf.T @ (rhs * n_o)) / s2
        fitted = pf @ t
        prior_term = np.sum(t * (field.Q_t @ t))
        ratio = kf.logdet() - field.logdet_precision()
    resid = obs.Y - (fitted[:, None] if shared else fitted)
    quad = np.sum(resid**2) / s2 + prior_term
    logdet = n_tot * math.log(s2) + (1 if shared else obs.n_o) * ratio
    return float(-0.5 * quad - 0.5 * logdet - 0.5 * n_tot * math.log(2.0 * math.pi))


def _observation_log_marginal(field: GaussianField, obs: ObservationSet, shared: bool) -> float:
    s2 = obs.sigma_e**2
    n_y, n_o = obs.n_y, obs.n_o
    pc = field.projected_covariance(obs.P)
    if not shared:
        cf = scipy.linalg.cho_factor(pc + s2 * np.eye(n_y), lower=True)
        quad = np.einsum("ij,ij->", obs.Y, scipy.linalg.cho_solve(cf, obs.Y))
        logdet = n_o * 2.0 * np.sum(np.log(np.diag(cf[0])))
    else:
        # readings share the field: the mean reading carries the field and the
        # scatter about it only noise
        ybar = obs.Y.mean(axis=1)
        cf = scipy.linalg.cho_factor(pc + (s2 / n_o) * np.eye(n_y), lower=True)
        quad = ybar @ scipy.linalg.cho_solve(cf, ybar) + np.sum((obs.Y - ybar[:, None]) ** 2) / s2
        logdet = (2.0 * np.sum(np.log(np.diag(cf[0]))) + (n_o - 1) * n_y * math.log(s2)
                  + n_y * math.log(n_o))
    return float(-0.5 * quad - 0.5 * logdet - 0.5 * n_y * n_o * math.log(2.0 * math.pi))


def gp_objective(mesh: Mesh, obs: ObservationSet, nu: float, m: int = 6, fixed=None,
                 readings: str = "shared", method: str = "observation"):
    """Log marginal likelihood as a function of ``sigma``, ``ell`` and ``sigma_e``.

    Keys missing from the argument are taken from ``fixed``; ``sigma_e``
    defaults to the noise level stored in ``obs``.  A search over lengthscales
    visits badly resolved fields, hence the observation-space default.
    """
    fixed = dict(fixed or {})
    state: dict = {}

    def objective(params) -> float:
        p = {**fixed, **params}
        field = build_field(mesh, MaternParams(p["sigma"], p["ell"], nu, mesh.dim_param), m,
                            operator_analysis=state.get("operator"))
        o = obs.with_noise(p["sigma_e"]) if "sigma_e" in p else obs
        if method == "observation":
            value = gp_log_marginal(field, o, readings, method=method)
            state.setdefault("operator", field._operator_factor.symbolic)
            return value
        if "analysis" not in state:
            state["analysis"] = _condition(field, o)[0].symbolic
        return gp_log_marginal(field, o, readings, state["analysis"])

    return objective
