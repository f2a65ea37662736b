"""Matérn fields as solutions of (fractional) SPDEs discretized by linear finite elements."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln, kv

from .mesh import CoefficientField, Mesh, assemble_stiffness, lumped_mass, observation_matrix
from .rational import (
    DEFAULT_EPS,
    OperatorProduct,
    RationalApproximant,
    RationalApproximationError,
    best_rational_approx,
    operator_factors,
)
from .sparsela import CholeskyFactor, canonical, cholesky, from_triplets, symmetrize

MAGIC = b"SPDEF1"


@dataclass(frozen=True)
class MaternParams:
    """Matérn covariance parameters.

    Attributes
    ----------
    sigma : float
        Marginal standard deviation.
    ell : float
        Lengthscale.
    nu : float
        Smoothness.
    d : int
        Intrinsic dimension of the domain.
    """

    sigma: float
    ell: float
    nu: float
    d: int = 1

    def __post_init__(self):
        for name in ("sigma", "ell", "nu"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.sigma > 0 and self.ell > 0 and self.nu > 0):
            raise ValueError("sigma, ell and nu must be positive")
        if self.d not in (1, 2):
            raise ValueError("intrinsic dimension must be 1 or 2")


@dataclass(frozen=True)
class SpdeParams:
    """Parameters of ``(κ² - Δ)^β s = g / τ`` and the split ``β = α + γ``."""

    kappa: float
    beta: float
    tau: float
    d: int = 1

    def __post_init__(self):
        for name in ("kappa", "beta", "tau"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.kappa > 0 and self.tau > 0):
            raise ValueError("kappa and tau must be positive")
        if not self.beta > self.d / 4:
            raise ValueError(f"beta must exceed d/4 = {self.d / 4}")

    @property
    def alpha(self) -> int:
        return max(1, int(math.floor(self.beta + 1e-12)))

    @property
    def gamma(self) -> float:
        g = self.beta - self.alpha
        return 0.0 if abs(g) < 1e-12 else g


def matern_to_spde(p: MaternParams) -> SpdeParams:
    """SPDE coefficients that reproduce a Matérn covariance."""
    kappa = math.sqrt(2.0 * p.nu) / p.ell
    beta = p.nu / 2.0 + p.d / 4.0
    log_tau2 = (
        gammaln(p.nu) - 2.0 * math.log(p.sigma) - gammaln(p.nu + p.d / 2.0)
        - (p.d / 2.0) * math.log(4.0 * math.pi) - 2.0 * p.nu * math.log(kappa)
    )
    return SpdeParams(kappa, beta, math.exp(0.5 * log_tau2), p.d)


def spde_to_matern(kappa: float, beta: float, tau: float, d: int) -> MaternParams:
    """Inverse of :func:`matern_to_spde`."""
    if not beta > d / 4:
        raise ValueError(f"beta must exceed d/4 = {d / 4}")
    nu = 2.0 * (beta - d / 4.0)
    ell = math.sqrt(2.0 * nu) / kappa
    log_s2 = (
        gammaln(nu) - 2.0 * math.log(tau) - gammaln(nu + d / 2.0)
        - (d / 2.0) * math.log(4.0 * math.pi) - 2.0 * nu * math.log(kappa)
    )
    return MaternParams(math.exp(0.5 * log_s2), ell, nu, d)


def matern_covariance(r, p: MaternParams) -> np.ndarray:
    """Matérn covariance at distances ``r``."""
    r = np.abs(np.asarray(r, dtype=np.float64))
    z = math.sqrt(2.0 * p.nu) * r / p.ell
    out = np.full(z.shape, p.sigma**2, dtype=np.float64)
    pos = z > 0
    zp = z[pos]
    logc = (1.0 - p.nu) * math.log(2.0) - gammaln(p.nu)
    out[pos] = p.sigma**2 * np.exp(logc + p.nu * np.log(zp)) * kv(p.nu, zp)
    return out


def coefficients_from_matern(p: MaternParams) -> CoefficientField:
    """Constant coefficients for a stationary field."""
    s = matern_to_spde(p)
    return CoefficientField.constant(s.kappa**2, s.tau)


def precision_recursion(L, mass: np.ndarray, tau_nodes: np.ndarray, alpha: int) -> sp.csr_matrix:
    """Precision of ``L^α s = g / τ`` with lumped mass ``mass``.

    ``Q₁ = Lᵀ T M⁻¹ T L`` with ``T = diag(τ)``, then
    ``Q_k = Lᵀ M⁻¹ Q_{k-1} M⁻¹ L``, symmetrized after every product.
    """
    if alpha < 1:
        raise ValueError("alpha must be at least 1")
    L = canonical(L)
    mass = np.asarray(mass, dtype=np.float64)
    tau_nodes = np.broadcast_to(np.asarray(tau_nodes, dtype=np.float64), mass.shape)
    q = symmetrize(L.T @ sp.diags(tau_nodes**2 / mass) @ L)
    minv_l = canonical(sp.diags(1.0 / mass) @ L)
    for _ in range(alpha - 1):
        q = symmetrize(minv_l.T @ q @ minv_l)
    return q


def integer_precision(mesh: Mesh, coeff: CoefficientField, alpha: int) -> sp.csr_matrix:
    """Precision matrix for an integer exponent ``α`` on ``mesh``."""
    L = assemble_stiffness(mesh, coeff)
    mass = lumped_mass(mesh)
    return precision_recursion(L, mass, coeff.tau_at(mesh.nodes), alpha)


class GaussianField:
    """Zero-mean field ``s = F_r t`` with ``t ~ N(0, Q_t⁻¹)``.

    For integer exponents ``F_r`` and ``F_l`` are None and ``t = s``.  The
    precision ``Q_t`` is factorized on first use.  Covariance products use the
    factored form ``Q_s̃ = B D Bᵀ`` with ``B = (L M⁻¹)^(α-1) L`` instead, which
    only needs solves with ``L`` and stays accurate when ``Q_t`` itself is too
    ill-conditioned to factorize in double precision.
    """

    def __init__(self, mesh: Mesh, params: SpdeParams, matern: MaternParams | None,
                 mass: np.ndarray, L: sp.csr_matrix, tau_nodes: np.ndarray, Q_t: sp.csr_matrix,
                 F_l: OperatorProduct | None = None, F_r: OperatorProduct | None = None,
                 approx: RationalApproximant | None = None, analysis=None,
                 operator_analysis=None):
        self.mesh = mesh
        self.params = params
        self.matern = matern
        self.mass = mass
        self.L = L
        self.tau_nodes = np.broadcast_to(np.asarray(tau_nodes, dtype=np.float64), mass.shape)
        self.Q_t = Q_t
        self.F_l = F_l
        self.F_r = F_r
        self.approx = approx
        self._analysis = analysis
        self._operator_analysis = operator_analysis

    @property
    def n(self) -> int:
        return self.mass.size

    @property
    def is_fractional(self) -> bool:
        return self.F_r is not None

    @cached_property
    def factor(self) -> CholeskyFactor:
        return cholesky(self.Q_t, self._analysis)

    @cached_property
    def _operator_factor(self) -> CholeskyFactor:
        return cholesky(self.L, self._operator_analysis)

    def logdet_precision(self) -> float:
        """``log det Q_t`` from the factored structure.

        ``log det Q_s̃ = 2α log det L - 2(α-1) log det M + Σ log(τ²/M)`` and each
        factor of ``F_l`` contributes ``2 (log det(M - dL/λ₁) - log det M)``.
        """
        alpha = self.params.alpha
        logm = np.log(self.mass)
        out = (2 * alpha * self._operator_factor.logdet() - 2 * (alpha - 1) * logm.sum()
               + np.sum(np.log(self.tau_nodes**2) - logm))
        if self.F_l is not None:
            out += 2 * self.n * math.log(abs(self.F_l.scale))
            out += 2 * sum(f - logm.sum() for f in self.F_l.shifted_logdets())
        return float(out)

    def apply_fr(self, v: np.ndarray) -> np.ndarray:
        return v if self.F_r is None else self.F_r.matvec(v)

    def apply_frt(self, v: np.ndarray) -> np.ndarray:
        return v if self.F_r is None else self.F_r.rmatvec(v)

    def _half_core(self, v: np.ndarray) -> np.ndarray:
        """``G v`` with ``G = (L⁻¹M)^(α-1) L⁻¹``, so that ``Q_s̃⁻¹ = G D⁻¹ G``."""
        lf = self._operator_factor
        mcol = self.mass if v.ndim == 1 else self.mass[:, None]
        x = lf.solve(v)
        for _ in range(self.params.alpha - 1):
            x = lf.solve(mcol * x)
        return x

    def _core_covariance(self, v: np.ndarray) -> np.ndarray:
        """``Q_s̃⁻¹ v = G D⁻¹ G v`` with ``D = diag(τ²/M)``."""
        dcol = self.tau_nodes**2 / self.mass
        dcol = dcol if v.ndim == 1 else dcol[:, None]
        return self._half_core(self._half_core(v) / dcol)

    def aux_covariance_apply(self, v: np.ndarray) -> np.ndarray:
        """``Q_t⁻¹ v`` through the factored form, without touching ``Q_t``."""
        x = np.asarray(v, dtype=np.float64)
        if self.F_l is not None:
            x = self.F_l.solve_transpose(x)
        x = self._core_covariance(x)
        if self.F_l is not None:
            x = self.F_l.solve(x)
        return x

    def aux_whiten(self, v: np.ndarray) -> np.ndarray:
        """``W v`` such that ``aᵀ Q_t⁻¹ b = (W a)ᵀ (W b)``."""
        x = np.asarray(v, dtype=np.float64)
        if self.F_l is not None:
            x = self.F_l.solve_transpose(x)
        z = self._half_core(x)
        w = np.sqrt(self.mass) / self.tau_nodes
        return z * (w if z.ndim == 1 else w[:, None])

    def covariance_apply(self, v: np.ndarray) -> np.ndarray:
        """``C_s v = F_r Q_t⁻¹ F_rᵀ v``."""
        return self.apply_fr(self.aux_covariance_apply(self.apply_frt(np.asarray(v, dtype=np.float64))))

    def projected_covariance(self, P) -> np.ndarray:
        """Dense ``P C_s Pᵀ``, half the solves of :meth:`covariance_apply`."""
        z = self.aux_whiten(self.apply_frt(P.T.toarray()))
        out = z.T @ z
        return 0.5 * (out + out.T)

    def dense_covariance(self) -> np.ndarray:
        """Dense covariance; intended for small test problems only."""
        return self.covariance_apply(np.eye(self.n))


def spectral_bound(mesh: Mesh, coeff: CoefficientField) -> float:
    """Lower bound ``min κ²`` on the spectrum of ``M⁻¹L`` for Neumann operators."""
    return float(np.min(coeff.kappa2_at(mesh.centroids)))


def build_field(
    mesh: Mesh,
    p: MaternParams,
    m: int = 6,
    coeff: CoefficientField | None = None,
    eps: float = DEFAULT_EPS,
    analysis=None,
    operator_analysis=None,
) -> GaussianField:
    """Discretize a Matérn field on ``mesh``.

    The precision is assembled here; its factorization is deferred until a
    sample or a posterior needs it.

    Parameters
    ----------
    mesh : Mesh
    p : MaternParams
        ``p.d`` must equal the parametric dimension of the mesh.
    m : int
        Rational degree for a fractional exponent; ignored otherwise.
    coeff : CoefficientField, optional
        Overrides the constant coefficients derived from ``p``.
    eps : float
        Lower end of the rational approximation interval.
    analysis : Symbolic, optional
        Ordering from an earlier factorization of ``Q_t`` with the same pattern.
    operator_analysis : Symbolic, optional
        Same for the operator ``L``.

    Raises
    ------
    RationalApproximationError
        If the rational approximant failed to equioscillate.
    """
    if p.d != mesh.dim_param:
        raise ValueError(f"Matérn dimension {p.d} differs from mesh dimension {mesh.dim_param}")
    spde = matern_to_spde(p)
    coeff = coeff or CoefficientField.constant(spde.kappa**2, spde.tau)
    L = assemble_stiffness(mesh, coeff)
    mass = lumped_mass(mesh)
    q = precision_recursion(L, mass, coeff.tau_at(mesh.nodes), spde.alpha)
    fr = None
    approx = None
    if spde.gamma != 0.0:
        approx = best_rational_approx(spde.gamma, int(m), eps)
        if not approx.converged:
            raise RationalApproximationError(
                f"rational approximation of degree {m} for exponent {spde.gamma:.6g} "
                f"did not equioscillate (deviation {approx.deviation:.3f})"
            )
        fl, fr = operator_factors(approx, L, mass, spectral_bound(mesh, coeff))
        fl.analysis = operator_analysis
        flm = fl.to_sparse()
        q = symmetrize(flm.T @ q @ flm)
    else:
        fl = None
    return GaussianField(mesh, spde, p, mass, L, coeff.tau_at(mesh.nodes), q, fl, fr, approx,
                         analysis, operator_analysis)


def sample_field(field: GaussianField, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` samples as the columns of an ``(n_nodes, n)`` array."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((field.n, int(n)))
    if n == 0:
        return z
    return field.apply_fr(field.factor.solve_lt(z))


def covariance_column(field: GaussianField, j: int) -> np.ndarray:
    """Column ``j`` of the implied covariance."""
    if not 0 <= j < field.n:
        raise IndexError(f"node {j} out of range")
    e = np.zeros(field.n)
    e[j] = 1.0
    return field.covariance_apply(e)


def covariance_at_point(field: GaussianField, x) -> np.ndarray:
    """Covariance between every node and the field value at point ``x``."""
    p = observation_matrix(field.mesh, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return field.covariance_apply(p.T.toarray()[:, 0])


def window_weights(mesh: Mesh, window) -> np.ndarray:
    """Nodal trapezoidal weights restricted to elements inside ``window``.

    ``window`` is ``(lo, hi)`` in 1D or ``((x_lo, x_hi), (y_lo, y_hi))`` in 2D.
    """
    w = np.asarray(window, dtype=np.float64).reshape(mesh.dim_embed, 2)
    pts = mesh.nodes[mesh.elements]
    tol = 1e-12 * max(1.0, float(np.abs(w).max()))
    inside = np.all((pts >= w[:, 0] - tol) & (pts <= w[:, 1] + tol), axis=(1, 2))
    k = mesh.elements.shape[1]
    el = mesh.elements[inside]
    return np.bincount(el.ravel(), weights=np.repeat(mesh.measures[inside] / k, k),
                       minlength=mesh.n_nodes)


def covariance_error(field: GaussianField, matern: MaternParams, x_ref, window,
                     column: np.ndarray | None = None) -> float:
    """Relative L² error of the covariance with respect to ``x_ref`` over ``window``.

    Parameters
    ----------
    field : GaussianField
        Built on a 1D or planar 2D mesh.
    matern : MaternParams
        Reference covariance.
    x_ref : float or point
    window : see :func:`window_weights`
    column : array, optional
        Discrete covariance column to assess instead of the field's own.
    """
    mesh = field.mesh
    if mesh.dim_embed != mesh.dim_param:
        raise ValueError("no analytic reference covariance on embedded surfaces")
    x_ref = np.atleast_1d(np.asarray(x_ref, dtype=np.float64))
    ch = covariance_at_point(field, x_ref) if column is None else column
    r = np.linalg.norm(mesh.nodes - x_ref[None, :], axis=1)
    c = matern_covariance(r, matern)
    w = window_weights(mesh, window)
    return float(np.sqrt(np.sum(w * (ch - c) ** 2) / np.sum(w * c**2)))


# ---------------------------------------------------------------------------
# persistence


def _store_product(prefix: str, op: OperatorProduct, header: dict, arrays: dict) -> None:
    header[prefix] = {"scale": op.scale, "shifts": op.shifts.tolist(), "lam1": op.lam1}
    for k, (r, c, v) in enumerate(op.triplets()):
        arrays[f"{prefix}{k}_row"], arrays[f"{prefix}{k}_col"], arrays[f"{prefix}{k}_val"] = r, c, v


def _load_product(prefix: str, header: dict, payload, L, mass) -> OperatorProduct | None:
    info = header.get(prefix)
    if info is None:
        return None
    n = mass.size
    op = OperatorProduct(info["scale"], np.array(info["shifts"]), L, mass, info["lam1"])
    for k in range(len(op.factors)):
        op.factors[k] = from_triplets(
            (payload[f"{prefix}{k}_row"], payload[f"{prefix}{k}_col"], payload[f"{prefix}{k}_val"]),
            (n, n),
        )
    return op


def save_field(path: str | Path, field: GaussianField) -> None:
    """Write a field to a binary container.

    Layout: the magic bytes ``SPDEF1``, a little-endian u64 header length, a
    JSON header (mesh hash, parameters, factor scalars) and an ``npz`` payload
    with the triplets of ``Q_t``, ``L`` and every operator factor.
    """
    arrays = {"mass": field.mass, "tau": np.asarray(field.tau_nodes)}
    q = field.Q_t.tocoo()
    arrays.update(q_row=q.row, q_col=q.col, q_val=q.data)
    lmat = field.L.tocoo()
    arrays.update(l_row=lmat.row, l_col=lmat.col, l_val=lmat.data)
    header = {
        "mesh_hash": field.mesh.fingerprint(),
        "spde": asdict(field.params),
        "matern": None if field.matern is None else asdict(field.matern),
        "n": field.n,
    }
    if field.F_r is not None:
        _store_product("fr", field.F_r, header, arrays)
        _store_product("fl", field.F_l, header, arrays)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    meta = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(buf.getvalue())


def load_field(path: str | Path, mesh: Mesh) -> GaussianField:
    """Read a field written by :func:`save_field` for the same mesh."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a field file")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size).decode())
        payload = np.load(io.BytesIO(fh.read()))
    if header["mesh_hash"] != mesh.fingerprint():
        raise ValueError(f"{path}: field was stored for a different mesh")
    n = header["n"]
    q = from_triplets((payload["q_row"], payload["q_col"], payload["q_val"]), (n, n))
    lmat = from_triplets((payload["l_row"], payload["l_col"], payload["l_val"]), (n, n))
    mass = payload["mass"]
    fr = _load_product("fr", header, payload, lmat, mass)
    fl = _load_product("fl", header, payload, lmat, mass)
    matern = None if header["matern"] is None else MaternParams(**header["matern"])
    return GaussianField(mesh, SpdeParams(**header["spde"]), matern, mass, lmat,
                         payload["tau"], q, fl, fr)
