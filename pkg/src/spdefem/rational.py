"""Best rational approximation of ``x**gamma`` and the matching operator factors.

The approximant is found by successive adjustment of the interpolation nodes
of a barycentric rational interpolant until the error equioscillates.  Its
zeros and poles turn ``x**gamma`` into products of shifted sparse operators.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .sparsela import NotPositiveDefiniteError, canonical, cholesky

DEFAULT_EPS = 1e-6
EQUIOSCILLATION_TOL = 0.05
MAX_ITER = 100
STEP_EXPONENT = 0.6


class RationalApproximationError(RuntimeError):
    """The approximant did not reach the equioscillation target."""


@dataclass(frozen=True)
class RationalApproximant:
    """Rational approximation of ``x**gamma`` on ``[eps, 1]``.

    Attributes
    ----------
    gamma, degree, eps
        Target exponent, numerator/denominator degree and interval lower end.
    nodes, values, weights
        Barycentric support points, ``x**gamma`` there, and barycentric weights.
    zeros, poles
        Roots of numerator and denominator.
    lead_num, lead_den
        Leading coefficients; only their ratio matters.
    max_error
        Largest absolute error over ``[eps, 1]``.
    extrema
        Signed error at each located local extremum.
    converged
        Whether the extrema alternate in sign and agree within 5%.
    """

    gamma: float
    degree: int
    eps: float
    nodes: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    zeros: np.ndarray
    poles: np.ndarray
    lead_num: float
    lead_den: float
    max_error: float
    extrema: np.ndarray = field(repr=False)
    converged: bool
    iterations: int = 0

    def __call__(self, x) -> np.ndarray:
        return _bary_eval(np.asarray(x, dtype=np.float64), self.nodes, self.values, self.weights)

    def factored(self, x) -> np.ndarray:
        """Evaluate ``(a / b) · Π(x - c_i) / Π(x - d_j)``."""
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape, self.lead_num / self.lead_den)
        for c in self.zeros:
            out = out * (x - c)
        for d in self.poles:
            out = out / (x - d)
        return out

    def error(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x ** self.gamma - self(x)

    @property
    def deviation(self) -> float:
        e = np.abs(self.extrema)
        return float((e.max() - e.min()) / e.max()) if e.size and e.max() > 0 else 0.0


def _bary_eval(x, nodes, values, weights):
    x = np.atleast_1d(x)
    diff = x[:, None] - nodes[None, :]
    exact = diff == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        c = weights[None, :] / diff
        r = (c @ values) / c.sum(axis=1)
    hit = exact.any(axis=1)
    if hit.any():
        r[hit] = values[np.argmax(exact[hit], axis=1)]
    return r


def _interpolant(f, points: np.ndarray, gamma: float):
    """Barycentric rational interpolant of type (m, m) through ``2m+1`` points."""
    support = points[0::2]
    test = points[1::2]
    fs = f(support)
    ft = f(test)
    loewner = (ft[:, None] - fs[None, :]) / (test[:, None] - support[None, :])
    # column scaling keeps the null vector well resolved over wide ranges
    scale = np.linalg.norm(loewner, axis=0)
    scale[scale == 0] = 1.0
    _, _, vt = np.linalg.svd(loewner / scale, full_matrices=True)
    w = vt[-1] / scale
    return support, fs, w


def _local_maxima(f, support, fs, w, points, a, b, samples=24, rounds=3):
    """Signed error extremum in each of the intervals delimited by ``points``."""
    edges = np.concatenate([[a], points, [b]])
    lo, hi = edges[:-1], edges[1:]
    t = np.linspace(0.0, 1.0, samples)
    for r in range(rounds + 1):
        xs = lo[:, None] + (hi - lo)[:, None] * t[None, :]
        err = f(xs) - _bary_eval(xs.ravel(), support, fs, w).reshape(xs.shape)
        k = np.argmax(np.abs(err), axis=1)
        if r == rounds:
            break
        step = (hi - lo) / (samples - 1)
        xk = xs[np.arange(len(k)), k]
        lo = np.maximum(xk - step, edges[:-1])
        hi = np.minimum(xk + step, edges[1:])
    rows = np.arange(len(k))
    return xs[rows, k], err[rows, k]


def _initial_points(m: int, eps: float) -> np.ndarray:
    """``2m+1`` Chebyshev points in ``log x``, clustered toward ``eps``."""
    n = 2 * m + 1
    k = np.arange(n)
    cheb = 0.5 - 0.5 * np.cos((2 * k + 1) * np.pi / (2 * n))
    return np.exp(np.log(eps) * (1.0 - cheb))


def _roots(support, lead: np.ndarray):
    """Eigenvalues of the arrowhead pencil for numerator (``lead=fs·w``) or denominator (``lead=w``)."""
    n = support.size
    e = np.zeros((n + 1, n + 1))
    e[0, 1:] = lead
    e[1:, 0] = 1.0
    e[1:, 1:] = np.diag(support)
    bmat = np.eye(n + 1)
    bmat[0, 0] = 0.0
    ev = scipy.linalg.eigvals(e, bmat)
    ev = ev[np.isfinite(ev)]
    return ev


def _polish(root: float, support, coef, iters=4):
    """Newton refinement of a root of ``Σ coef_i / (x - support_i)``."""
    x = root
    for _ in range(iters):
        d = x - support
        if np.any(d == 0):
            break
        g = np.sum(coef / d)
        dg = -np.sum(coef / d**2)
        if dg == 0 or not np.isfinite(g / dg):
            break
        step = g / dg
        x_new = x - step
        if abs(step) <= 4 * np.finfo(float).eps * abs(x):
            x = x_new
            break
        x = x_new
    return x


def _real_roots(support, coef, m, eps):
    ev = _roots(support, coef)
    if ev.size != m or np.any(np.abs(ev.imag) > 1e-8 * np.maximum(1.0, np.abs(ev.real))):
        return None
    r = np.sort(ev.real)
    r = np.array([_polish(x, support, coef) for x in r])
    return r


def _exact(gamma: float, m: int, eps: float) -> RationalApproximant:
    if gamma == 0.0:
        nodes, w, zeros = np.array([1.0]), np.array([1.0]), np.zeros(0)
    else:
        nodes, w, zeros = np.array([eps, 1.0]), np.array([1.0, -1.0]), np.zeros(1)
    return RationalApproximant(
        gamma, m, eps, nodes, nodes**gamma, w, zeros, np.zeros(0), 1.0, 1.0,
        0.0, np.zeros(0), True, 0,
    )


@functools.lru_cache(maxsize=256)
def best_rational_approx(gamma: float, m: int, eps: float = DEFAULT_EPS) -> RationalApproximant:
    """Best uniform rational approximation of type (m, m) to ``x**gamma`` on ``[eps, 1]``.

    Parameters
    ----------
    gamma : float
        Exponent in (-1, 1]; ``0`` and ``1`` are represented exactly.
    m : int
        Numerator and denominator degree.
    eps : float
        Lower end of the approximation interval.

    Returns
    -------
    RationalApproximant
        ``converged`` is False when the equioscillation target was not met
        within the iteration cap; the best iterate is returned in that case.
    """
    gamma = float(gamma)
    if not -1.0 < gamma <= 1.0:
        raise ValueError(f"exponent {gamma} outside (-1, 1]")
    if m < 1:
        raise ValueError("degree must be at least 1")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if gamma in (0.0, 1.0):
        return _exact(gamma, m, eps)

    def f(x):
        return np.power(x, gamma)

    a, b = eps, 1.0
    pts = _initial_points(m, eps)
    best = None
    step = STEP_EXPONENT
    last_dev = np.inf
    for it in range(1, MAX_ITER + 1):
        support, fs, w = _interpolant(f, pts, gamma)
        xe, ee = _local_maxima(f, support, fs, w, pts, a, b)
        mag = np.abs(ee)
        dev = (mag.max() - mag.min()) / mag.max()
        alternating = bool(np.all(np.sign(ee[1:]) == -np.sign(ee[:-1])))
        if best is None or mag.max() < best[0]:
            best = (mag.max(), pts.copy(), ee.copy(), it, dev, alternating)
        if dev <= EQUIOSCILLATION_TOL * 0.2 and alternating:
            break
        if dev > last_dev:
            step = max(step * 0.7, 0.02)
        last_dev = dev
        edges = np.concatenate([[a], pts, [b]])
        lengths = np.diff(edges)
        lengths = lengths * (mag / np.exp(np.mean(np.log(mag)))) ** (-step)
        lengths *= (b - a) / lengths.sum()
        pts = a + np.cumsum(lengths)[:-1]
    _, pts, ee, it, dev, alternating = best
    support, fs, w = _interpolant(f, pts, gamma)
    xe, ee = _local_maxima(f, support, fs, w, pts, a, b, samples=48, rounds=6)
    mag = np.abs(ee)
    dev = (mag.max() - mag.min()) / mag.max()
    alternating = bool(np.all(np.sign(ee[1:]) == -np.sign(ee[:-1])))
    converged = alternating and dev <= EQUIOSCILLATION_TOL
    zeros = _real_roots(support, fs * w, m, eps)
    poles = _real_roots(support, w, m, eps)
    if zeros is None or poles is None:
        converged = False
        zeros = np.zeros(0) if zeros is None else zeros
        poles = np.zeros(0) if poles is None else poles
    elif np.any((zeros >= eps) & (zeros <= 1.0)) or np.any((poles >= eps) & (poles <= 1.0)):
        converged = False
    lead = float(np.sum(w * fs) / np.sum(w))
    if not converged:
        warnings.warn(
            f"rational approximation of x^{gamma} with m={m} did not equioscillate "
            f"(deviation {dev:.3f})",
            RuntimeWarning,
            stacklevel=2,
        )
    return RationalApproximant(
        gamma, m, eps, support, fs, w, zeros, poles, lead, 1.0,
        float(mag.max()), ee, converged, it,
    )


class OperatorProduct:
    """Scalar times a product of commuting factors ``I - c_i · M⁻¹L / λ₁``.

    The factors are kept as a list of sparse matrices and never multiplied into
    a single matrix unless :meth:`to_sparse` is requested.

    Parameters
    ----------
    scale : float
        Scalar prefactor.
    shifts : array
        The ``c_i`` values.
    L : sparse matrix
        Symmetric operator matrix.
    mass : array
        Diagonal of the lumped mass matrix.
    lam1 : float
        Lower bound of the generalized spectrum of ``(L, M)``.
    """

    def __init__(self, scale: float, shifts: np.ndarray, L, mass: np.ndarray, lam1: float):
        self.scale = float(scale)
        self.shifts = np.asarray(shifts, dtype=np.float64)
        self.L = canonical(L)
        self.mass = np.asarray(mass, dtype=np.float64)
        self.lam1 = float(lam1)
        n = self.mass.size
        minv = sp.diags(1.0 / self.mass)
        eye = sp.identity(n, format="csr")
        self.factors = [canonical(eye - (c / self.lam1) * (minv @ self.L)) for c in self.shifts]
        self._solvers = None
        # every shifted matrix shares the pattern of L, so one ordering serves all
        self.analysis = None

    @property
    def n(self) -> int:
        return self.mass.size

    def __len__(self) -> int:
        return len(self.factors)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Apply the operator to a vector or the columns of a matrix."""
        out = np.array(v, dtype=np.float64, copy=True)
        for f in self.factors:
            out = f @ out
        return self.scale * out

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        """Apply the transposed operator."""
        out = np.array(v, dtype=np.float64, copy=True)
        for f in reversed(self.factors):
            out = f.T @ out
        return self.scale * out

    def _shifted_solvers(self):
        if self._solvers is None:
            self._solvers = []
            self._logdets = []
            m = sp.diags(self.mass)
            for c in self.shifts:
                a = canonical(m - (c / self.lam1) * self.L)
                try:
                    f = cholesky(a, self.analysis)
                    self.analysis = f.symbolic
                    self._solvers.append(f.solve)
                    self._logdets.append(f.logdet())
                except NotPositiveDefiniteError:
                    lu = spla.splu(a.tocsc())
                    self._solvers.append(lu.solve)
                    self._logdets.append(float(np.sum(np.log(np.abs(lu.U.diagonal())))))
        return self._solvers

    def shifted_logdets(self) -> list[float]:
        """``log |det(M - c L/λ₁)|`` for every factor."""
        self._shifted_solvers()
        return list(self._logdets)

    def solve(self, v: np.ndarray) -> np.ndarray:
        """Apply the inverse through one sparse solve per factor.

        ``(I - c M⁻¹L/λ₁) x = b`` is solved as ``(M - c L/λ₁) x = M b``, which
        is symmetric positive definite for the negative shifts of a best
        approximant; other shifts fall back to a general sparse LU.
        """
        out = np.array(v, dtype=np.float64, copy=True)
        mcol = self.mass if out.ndim == 1 else self.mass[:, None]
        for s in self._shifted_solvers():
            out = s(mcol * out)
        return out / self.scale

    def solve_transpose(self, v: np.ndarray) -> np.ndarray:
        """Apply the inverse of the transposed operator."""
        out = np.array(v, dtype=np.float64, copy=True)
        mcol = self.mass if out.ndim == 1 else self.mass[:, None]
        for s in self._shifted_solvers():
            out = mcol * s(out)
        return out / self.scale

    def to_sparse(self) -> sp.csr_matrix:
        """Explicit sparse product (used for the precision of the auxiliary variable)."""
        out = sp.identity(self.n, format="csr") * self.scale
        for f in self.factors:
            out = canonical(out @ f)
        return out

    def triplets(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        out = []
        for f in self.factors:
            c = f.tocoo()
            out.append((c.row, c.col, c.data))
        return out


def operator_factors(
    approx: RationalApproximant, L, mass, lam1: float
) -> tuple[OperatorProduct, OperatorProduct]:
    """Factors ``(F_l, F_r)`` with ``F_r F_l⁻¹ ≈ (M⁻¹L)^(-γ)``.

    With ``x = λ₁/λ`` mapping the spectrum of ``M⁻¹L`` into ``(0, 1]``,
    ``λ^(-γ) = λ₁^(-γ) x^γ`` and each root factor ``x - c`` becomes
    ``(λ₁/λ)(1 - cλ/λ₁)``; the powers of ``λ₁/λ`` cancel between numerator
    and denominator.

    Parameters
    ----------
    approx : RationalApproximant
    L : sparse matrix
        Symmetric SPDE operator matrix.
    mass : array or sparse diagonal matrix
        Lumped mass.
    lam1 : float
        Positive lower bound of the spectrum of ``M⁻¹L``.
    """
    if not lam1 > 0:
        raise ValueError("spectral lower bound must be positive")
    if sp.issparse(mass):
        mass = mass.diagonal()
    mass = np.asarray(mass, dtype=np.float64)
    if np.any(mass <= 0):
        raise ValueError("lumped mass must be positive")
    fr = OperatorProduct(approx.lead_num * lam1 ** (-approx.gamma), approx.zeros, L, mass, lam1)
    fl = OperatorProduct(approx.lead_den, approx.poles, L, mass, lam1)
    return fl, fr
