"""Bounded derivative-free maximization of marginal likelihoods.

The search runs in log-parameter space.  Each start performs coordinate sweeps
in which a one-dimensional quadratic is fitted through the current point and
two probes at distance ``r``, followed by accelerating pattern moves along the
net displacement of the sweep; the radius shrinks when a sweep brings no
improvement.  Starts that stall immediately are handed to Nelder-Mead.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

NAMES = ("sigma", "ell", "sigma_d", "ell_d", "sigma_e")
MAX_EVALS = 200
STEP_TOL = 1e-4
N_RESTARTS = 3


class HyperFitError(RuntimeError):
    """Raised when the objective is non-finite everywhere it was probed."""

    def __init__(self, message: str, last_finite: dict | None = None):
        super().__init__(message)
        self.last_finite = last_finite


@dataclass(frozen=True)
class HyperSpec:
    """Which parameters to optimize and within which bounds.

    Attributes
    ----------
    names : tuple of str
        Optimized parameters, a subset of ``sigma, ell, sigma_d, ell_d, sigma_e``.
    bounds : dict
        Name to ``(low, high)`` with ``0 < low < high``.
    fixed : dict
        Values of parameters that are passed through unchanged.
    """

    names: tuple
    bounds: dict
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("nothing to optimize")
        for n in names:
            if n not in NAMES:
                raise ValueError(f"{n!r} cannot be optimized; choose from {', '.join(NAMES)}")
            lo, hi = self.bounds.get(n, (None, None))
            if lo is None or not (0 < lo < hi):
                raise ValueError(f"bounds for {n!r} must satisfy 0 < low < high")
        if "nu" in names:
            raise ValueError("smoothness is kept fixed")

    @property
    def log_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.log([self.bounds[n][0] for n in self.names])
        hi = np.log([self.bounds[n][1] for n in self.names])
        return lo, hi

    def to_params(self, x: np.ndarray) -> dict:
        return {**self.fixed, **{n: float(math.exp(v)) for n, v in zip(self.names, x)}}


@dataclass
class HyperResult:
    params: dict
    value: float
    trace: list = field(repr=False)
    n_evals: int = 0

    def write_trace(self, path: str | Path, names: tuple) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["evaluation", "start", *names, "objective"])
            for i, (start, p, v) in enumerate(self.trace):
                w.writerow([i, start, *(f"{p[n]:.17g}" for n in names), f"{v:.17g}"])


class _Counter:
    """Objective wrapper in log space that records every evaluation."""

    def __init__(self, objective: Callable, spec: HyperSpec, budget: int):
        self.objective = objective
        self.spec = spec
        self.lo, self.hi = spec.log_bounds
        self.budget = budget
        self.trace: list = []
        self.start = 0
        self.used = 0
        self.last_finite: dict | None = None

    @property
    def exhausted(self) -> bool:
        return self.used >= self.budget

    def __call__(self, x: np.ndarray) -> float:
        x = np.clip(x, self.lo, self.hi)
        p = self.spec.to_params(x)
        try:
            v = float(self.objective(p))
        except (ArithmeticError, ValueError, np.linalg.LinAlgError):
            v = -math.inf
        if not math.isfinite(v):
            v = -math.inf
        else:
            self.last_finite = p
        self.used += 1
        self.trace.append((self.start, p, v))
        return v


def _coordinate_search(f: _Counter, x0: np.ndarray, f0: float, tol: float) -> tuple[np.ndarray, float]:
    x, fx = x0.copy(), f0
    span = f.hi - f.lo
    r = 0.1 * float(np.max(span))
    r_max = 0.25 * float(np.max(span))
    while r > tol and not f.exhausted:
        improved = False
        longest = 0.0
        x_prev = x.copy()
        for i in range(x.size):
            if f.exhausted:
                break
            e = np.zeros_like(x)
            e[i] = 1.0
            up = min(r, f.hi[i] - x[i])
            dn = min(r, x[i] - f.lo[i])
            cand = []
            fp = f(x + up * e) if up > 0 else -math.inf
            cand.append((fp, up))
            fm = f(x - dn * e) if dn > 0 and not f.exhausted else -math.inf
            cand.append((fm, -dn))
            if up > 0 and dn > 0 and math.isfinite(fp) and math.isfinite(fm) and not f.exhausted:
                # quadratic through (-dn, fm), (0, fx), (up, fp)
                a = ((fp - fx) / up + (fm - fx) / dn) / (up + dn)
                b = (fp - fx) / up - a * up
                if a < 0:
                    t = float(np.clip(-b / (2 * a), -dn, up))
                    if abs(t) > 1e-12 and abs(t - up) > 1e-12 and abs(t + dn) > 1e-12:
                        cand.append((f(x + t * e), t))
            best_v, best_t = max(cand, key=lambda c: c[0])
            if best_v > fx + 1e-12 * max(1.0, abs(fx)):
                x = x + best_t * e
                fx = best_v
                improved = True
                longest = max(longest, abs(best_t))
        if improved and x.size > 1:
            # pattern moves along the net displacement of the sweep, doubling
            # while they pay off; this follows ridges that single-coordinate
            # steps zig-zag across
            d = x - x_prev
            while not f.exhausted:
                xp = np.clip(x + d, f.lo, f.hi)
                if np.allclose(xp, x):
                    break
                vp = f(xp)
                if vp <= fx + 1e-12 * max(1.0, abs(fx)):
                    break
                x, fx = xp, vp
                longest = max(longest, float(np.max(np.abs(d))))
                d = 2.0 * d
        if not improved:
            r *= 0.5
        elif longest >= r * (1 - 1e-9):
            r = min(2.0 * r, r_max)
        else:
            r = max(2.0 * longest, 0.5 * r) if longest > 0.25 * r else 2.0 * longest
    return x, fx


def maximize(
    objective: Callable[[Mapping[str, float]], float],
    spec: HyperSpec,
    init: Mapping[str, float],
    seed: int = 0,
    max_evals: int = MAX_EVALS,
    tol: float = STEP_TOL,
    n_restarts: int = N_RESTARTS,
) -> HyperResult:
    """Maximize ``objective`` over the parameters named in ``spec``.

    Parameters
    ----------
    objective : callable
        Maps a dict of parameters (optimized and fixed) to a value.  Non-finite
        values and numerical exceptions count as ``-inf``.
    spec : HyperSpec
    init : mapping
        Starting values for the optimized parameters.
    seed : int
        Seed of the Latin hypercube used for the restart points.
    max_evals : int
        Evaluation budget per start.
    tol : float
        Smallest log-space step before a start is declared converged.
    n_restarts : int
        Number of Latin hypercube restarts in addition to ``init``.

    Returns
    -------
    HyperResult
        Best parameters, their value, and every evaluation as
        ``(start, params, value)``.

    Raises
    ------
    HyperFitError
        If ``init`` is not finite, or nothing finite was found at all.
    """
    lo, hi = spec.log_bounds
    x_init = np.log([float(init[n]) for n in spec.names])
    if np.any(x_init < lo - 1e-12) or np.any(x_init > hi + 1e-12):
        raise ValueError("initial values lie outside the bounds")
    starts = [np.clip(x_init, lo, hi)]
    if n_restarts > 0:
        lhs = qmc.LatinHypercube(d=len(spec.names), seed=np.random.default_rng(seed))
        starts += list(qmc.scale(lhs.random(n_restarts), lo, hi))
    trace: list = []
    best_x, best_v = None, -math.inf
    total = 0
    for k, x0 in enumerate(starts):
        f = _Counter(objective, spec, max_evals)
        f.start = k
        f0 = f(x0)
        if k == 0 and not math.isfinite(f0):
            trace.extend(f.trace)
            raise HyperFitError("objective is not finite at the initial values", f.last_finite)
        if math.isfinite(f0):
            x, fx = _coordinate_search(f, x0, f0, tol)
            if fx <= f0 and not f.exhausted:
                x, fx = _nelder_mead(f, x0, f0, tol)
        else:
            x, fx = x0, f0
        trace.extend(f.trace)
        total += f.used
        if fx > best_v:
            best_x, best_v = x, fx
    if best_x is None:
        raise HyperFitError("objective is not finite at any probe")
    return HyperResult(spec.to_params(best_x), best_v, trace, total)


def _nelder_mead(f: _Counter, x0: np.ndarray, f0: float, tol: float) -> tuple[np.ndarray, float]:
    remaining = f.budget - f.used
    if remaining <= 0:
        return x0, f0
    res = minimize(lambda x: -f(x) if not f.exhausted else -f0, x0, method="Nelder-Mead",
                   bounds=list(zip(f.lo, f.hi)),
                   options={"maxfev": remaining, "xatol": tol, "fatol": 1e-10})
    x = np.clip(res.x, f.lo, f.hi)
    v = -float(res.fun)
    return (x, v) if v > f0 else (x0, f0)
