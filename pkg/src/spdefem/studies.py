"""Reproducible numerical studies built from the library pieces.

Each study returns plain rows so the command-line driver can write them as CSV
and the tests can assert on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gp import ObservationSet, gp_objective, gp_posterior_sparse
from .hyper import HyperResult, HyperSpec, maximize
from .mesh import Mesh, hemisphere, observation_matrix, rectangle_mesh, refine, uniform_interval
from .spde import MaternParams, build_field, covariance_error, sample_field, spde_to_matern
from .statfem import (
    assemble_forward,
    forward_prior,
    mismatch_field,
    statfem_objective,
    statfem_posterior,
)

# ---------------------------------------------------------------------------
# covariance convergence on an interval


def convergence_mesh_sizes(levels: int, coarsest: float = 1 / 50) -> list[float]:
    """``levels`` mesh sizes halving from ``coarsest``."""
    if levels < 1:
        raise ValueError("need at least one level")
    return [coarsest / 2**k for k in range(levels)]


def covariance_convergence(
    beta: float,
    hs,
    ell: float = 0.05,
    sigma: float = 1.0,
    m: int = 6,
    domain=(-0.2, 1.2),
    window=(0.0, 1.0),
    x_ref: float = 0.5,
) -> list[tuple[float, float]]:
    """Relative covariance error ``η`` against the exact Matérn kernel per mesh size.

    The SPDE is solved on ``domain`` with Neumann ends; the error is measured on
    ``window`` only, away from the boundary layer.  ``β`` sets ``ν = 2β - 1/2``.

    Returns
    -------
    list of (h, eta)
    """
    nu = 2.0 * (beta - 0.25)
    if not nu > 0:
        raise ValueError("beta must exceed 1/4 in one dimension")
    p = MaternParams(sigma, ell, nu, 1)
    length = domain[1] - domain[0]
    rows = []
    for h in hs:
        n = int(round(length / h)) + 1
        field = build_field(uniform_interval(domain[0], domain[1], n), p, m)
        rows.append((float(h), covariance_error(field, p, x_ref, window)))
    return rows


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------------------
# hyperparameter recovery on a line


@dataclass(frozen=True)
class LineSetup:
    """Synthetic regression problem on an interval with a known Matérn truth."""

    sigma: float = 0.15
    ell: float = 1.0
    nu: float = 3.95
    sigma_e: float = 0.05
    n_nodes: int = 101
    length: float = 10.0
    n_y: int = 81
    n_o: int = 100
    m: int = 6


def line_readings(setup: LineSetup, seed: int = 0) -> tuple[Mesh, ObservationSet]:
    """Independent noisy draws of the true field at evenly spaced interior points.

    Every reading uses its own field realization, so the matching likelihood is
    the ``readings="independent"`` one.
    """
    mesh = uniform_interval(0.0, setup.length, setup.n_nodes)
    truth = build_field(mesh, MaternParams(setup.sigma, setup.ell, setup.nu, 1), setup.m)
    rng = np.random.default_rng(seed)
    pts = np.linspace(0.1 * setup.length, 0.9 * setup.length, setup.n_y)
    P = observation_matrix(mesh, pts[:, None])
    fields = sample_field(truth, setup.n_o, rng)
    Y = P @ fields + setup.sigma_e * rng.standard_normal((setup.n_y, setup.n_o))
    return mesh, ObservationSet(pts[:, None], P, Y, setup.sigma_e)


def fit_line_hyperparameters(setup: LineSetup, seed: int = 0, init=(0.3, 2.0),
                             bounds=((0.01, 1.0), (0.1, 10.0))) -> HyperResult:
    """Maximize the marginal likelihood over ``sigma`` and ``ell`` for :func:`line_readings`."""
    mesh, obs = line_readings(setup, seed)
    objective = gp_objective(mesh, obs, setup.nu, setup.m, readings="independent")
    spec = HyperSpec(("sigma", "ell"), {"sigma": bounds[0], "ell": bounds[1]})
    return maximize(objective, spec, {"sigma": init[0], "ell": init[1]}, seed=seed)


# ---------------------------------------------------------------------------
# regression on the hemisphere


def hemisphere_target(x: np.ndarray) -> np.ndarray:
    """Real spherical harmonic of degree 8 and order 4 in the direction of ``x``.

    ``θ`` is the azimuth and ``φ`` the angle from the pole.
    """
    x = np.atleast_2d(x)
    theta = np.arctan2(x[:, 1], x[:, 0])
    phi = np.arccos(np.clip(x[:, 2] / np.linalg.norm(x, axis=1), -1.0, 1.0))
    return (3.0 / 1024.0 * math.sqrt(1309.0 / math.pi) * np.cos(4 * theta) * np.sin(phi) ** 4
            * (99 + 156 * np.cos(2 * phi) + 65 * np.cos(4 * phi)))


def relative_l2_error(mesh: Mesh, nodal: np.ndarray, exact) -> float:
    """Relative L² error of a piecewise linear field, by the edge-midpoint rule."""
    el = mesh.elements
    num = den = 0.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        mid = 0.5 * (mesh.nodes[el[:, a]] + mesh.nodes[el[:, b]])
        s = exact(mid)
        uh = 0.5 * (nodal[el[:, a]] + nodal[el[:, b]])
        num += np.sum(mesh.measures * (s - uh) ** 2)
        den += np.sum(mesh.measures * s**2)
    return math.sqrt(num / den)


def hemisphere_regression(data_levels=(2, 3, 4, 5), mesh_level: int = 6, sigma: float = 0.1,
                          ell: float = 0.4, nu: float = 1.0,
                          sigma_e: float = 1e-10) -> list[tuple[int, float, float]]:
    """Posterior-mean error when observing the target at the nodes of coarser levels.

    Coarse hemisphere nodes are a prefix of the fine ones, so every data point
    is a vertex of the inference mesh.

    Returns
    -------
    list of (n_y, mean data spacing, relative L² error)
    """
    mesh = hemisphere(mesh_level)
    field = build_field(mesh, MaternParams(sigma, ell, nu, 2))
    rows = []
    for level in data_levels:
        if level > mesh_level:
            raise ValueError("data level finer than the inference mesh")
        coarse = hemisphere(level)
        y = hemisphere_target(coarse.nodes)[:, None]
        post = gp_posterior_sparse(field, ObservationSet.at_points(mesh, coarse.nodes, y, sigma_e))
        rows.append((coarse.n_nodes, coarse.mean_edge_length(),
                     relative_l2_error(mesh, post.mean, hemisphere_target)))
    return rows


# ---------------------------------------------------------------------------
# statFEM on the unit square

WALLS = ("left", "right", "bottom", "top")


def plate_truth_mean(x: np.ndarray) -> np.ndarray:
    """``sin(2π|x|) sin(3πx₁) sin(4πx₂)``, the response the data are centred on."""
    r = np.linalg.norm(x, axis=1)
    return np.sin(2 * np.pi * r) * np.sin(3 * np.pi * x[:, 0]) * np.sin(4 * np.pi * x[:, 1])


def plate_truth_source(x: np.ndarray) -> np.ndarray:
    """Negative Laplacian of :func:`plate_truth_mean`."""
    pi = np.pi
    r = np.linalg.norm(x, axis=1)
    a = np.sin(2 * pi * r)
    b = np.sin(3 * pi * x[:, 0]) * np.sin(4 * pi * x[:, 1])
    bx = 3 * pi * np.cos(3 * pi * x[:, 0]) * np.sin(4 * pi * x[:, 1])
    by = 4 * pi * np.sin(3 * pi * x[:, 0]) * np.cos(4 * pi * x[:, 1])
    # a'/r and the radial unit vector are singular at the origin, where b and
    # its gradient vanish
    safe = np.where(r > 0, r, 1.0)
    da = np.where(r > 0, 2 * pi * np.cos(2 * pi * r) / safe, 0.0)
    lap_a = -4 * pi**2 * a + da
    grad_dot = da * (x[:, 0] * bx + x[:, 1] * by)
    return -(lap_a * b + 2 * grad_dot - 25 * pi**2 * a * b)


def plate_model_source(x: np.ndarray) -> np.ndarray:
    return -28 * np.pi**2 * np.sin(3 * np.pi * x[:, 0]) * np.sin(4 * np.pi * x[:, 1])


@dataclass(frozen=True)
class PlateSetup:
    """Misspecified Poisson model on the unit square observed through a finer truth."""

    cells: int = 48
    candidate_grid: int = 16
    n_y: tuple = (30, 60, 120)
    n_o: tuple = (2, 10, 20)
    sigma_e: float = 0.005
    truth_kappa2: float = 50.0
    truth_scale: float = 280.0
    prior_kappa2: float = 800.0
    prior_scale: float = 4000.0
    nu_d: float = 1.0
    bounds_sigma_d: tuple = (1e-4, 1.0)
    bounds_ell_d: tuple = (0.01, 2.0)
    init: tuple = (0.01, 0.2)


def _source_field(mesh: Mesh, kappa2: float, scale: float):
    # (κ² - Δ) s = scale·√(2π) g, so τ = 1/(scale·√(2π)) and β = 1
    return build_field(mesh, spde_to_matern(math.sqrt(kappa2), 1.0, 1.0 / (scale * math.sqrt(2 * math.pi)), 2))


def plate_contraction(setup: PlateSetup = PlateSetup(), seed: int = 0,
                      n_o_values=None) -> list[dict]:
    """Fit the mismatch hyperparameters and report the posterior-mean error per data set.

    The truth lives on a once-refined mesh and every reading draws its own
    random source there.  Observation points are drawn from the interior nodes
    of a coarse grid; smaller sets are prefixes of larger ones, and so are the
    readings.

    Returns
    -------
    list of dict
        Keys ``n_o, n_y, sigma_d, ell_d, log_marginal, rmse, prior_rmse``.  The
        RMSE is taken over the inference nodes against the truth mean.
    """
    n_o_values = tuple(setup.n_o if n_o_values is None else n_o_values)
    rng = np.random.default_rng(seed)
    mesh = rectangle_mesh(setup.cells, setup.cells)
    fine = refine(mesh)
    walls = {w: 0.0 for w in WALLS}

    truth = assemble_forward(fine, walls, plate_truth_source)
    chi = _source_field(fine, setup.truth_kappa2, setup.truth_scale)
    n_read = max(n_o_values)
    z = truth.solve(truth.source[:, None] + sample_field(chi, n_read, rng))
    z_mean = truth.solve(truth.source)[: mesh.n_nodes]

    fm = assemble_forward(mesh, walls, plate_model_source)
    prior = forward_prior(fm, _source_field(mesh, setup.prior_kappa2, setup.prior_scale))
    prior_rmse = float(np.sqrt(np.mean((prior.mean - z_mean) ** 2)))

    g = np.linspace(0.0, 1.0, setup.candidate_grid + 1)[1:-1]
    candidates = np.array([[a, b] for a in g for b in g])
    n_max = max(setup.n_y)
    if n_max > len(candidates):
        raise ValueError(f"only {len(candidates)} candidate observation points")
    points = candidates[rng.permutation(len(candidates))[:n_max]]
    noise = setup.sigma_e * rng.standard_normal((n_max, n_read))
    readings = observation_matrix(fine, points) @ z + noise

    spec = HyperSpec(("sigma_d", "ell_d"),
                     {"sigma_d": setup.bounds_sigma_d, "ell_d": setup.bounds_ell_d})
    init = {"sigma_d": setup.init[0], "ell_d": setup.init[1]}
    rows = []
    for n_o in n_o_values:
        for n_y in setup.n_y:
            obs = ObservationSet.at_points(mesh, points[:n_y], readings[:n_y, :n_o], setup.sigma_e)
            objective = statfem_objective(prior, obs, setup.nu_d, {"sigma_e": setup.sigma_e})
            fit = maximize(objective, spec, init, seed=seed)
            mm = mismatch_field(mesh, fit.params["sigma_d"], fit.params["ell_d"], setup.nu_d)
            post = statfem_posterior(prior, mm, obs)
            rows.append({
                "n_o": n_o, "n_y": n_y,
                "sigma_d": fit.params["sigma_d"], "ell_d": fit.params["ell_d"],
                "log_marginal": fit.value,
                "rmse": float(np.sqrt(np.mean((post.mean - z_mean) ** 2))),
                "prior_rmse": prior_rmse,
            })
    return rows
