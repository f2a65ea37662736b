"""Command-line driver.

Exit codes: 0 on success, 2 for invalid input (flags, config values, files),
3 when a numerical step fails.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import __version__
from .gp import (
    ObservationSet,
    gp_objective,
    gp_posterior_sparse,
    gp_posterior_variance_at,
    read_observations,
)
from .hyper import HyperFitError, HyperSpec, maximize
from .mesh import (
    Mesh,
    MeshFormatError,
    PointOutsideMeshError,
    hemisphere,
    load_mesh,
    read_boundary,
    rectangle_mesh,
    uniform_interval,
)
from .rational import DEFAULT_EPS, RationalApproximationError, best_rational_approx
from .spde import MaternParams, build_field, covariance_at_point, matern_covariance, sample_field
from .sparsela import NotPositiveDefiniteError
from .statfem import (
    assemble_forward,
    forward_prior,
    mismatch_field,
    posterior_true_variance,
    statfem_objective,
    statfem_posterior,
)
from .studies import covariance_convergence, convergence_mesh_sizes, loglog_slope

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

NUMERICAL_ERRORS = (NotPositiveDefiniteError, RationalApproximationError, HyperFitError,
                    np.linalg.LinAlgError, ArithmeticError)


class ConfigError(ValueError):
    """Invalid command-line or configuration input."""


# ---------------------------------------------------------------------------
# configuration


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``[section]`` lines are ignored."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key.replace("-", "_")] = value
    return out


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    converted = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"unknown config key {key!r} for this subcommand")
        if isinstance(action, argparse._StoreTrueAction):
            converted[key] = _parse_bool(text)
        elif action.type is not None:
            try:
                converted[key] = action.type(text)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
        else:
            converted[key] = text
    sub.set_defaults(**converted)


def _interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}") from None
    return lo, hi


def _point(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated coordinates, got {text!r}") from None


@dataclass
class RunConfig:
    """Validated settings of one invocation."""

    command: str
    seed: int = 0
    m: int = 6
    output: str = "-"
    mesh: str | None = None
    boundary: Path | None = None
    options: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        opts = {k: v for k, v in vars(ns).items()
                if k not in ("command", "seed", "m", "output", "mesh", "boundary", "config")}
        cfg = cls(ns.command, ns.seed, getattr(ns, "m", 6), ns.output or "-",
                  getattr(ns, "mesh", None), None, opts)
        if cfg.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if cfg.m < 1:
            raise ConfigError("--m must be at least 1")
        if getattr(ns, "boundary", None):
            cfg.boundary = _existing(ns.boundary, "--boundary")
        for key in ("observations", "dirichlet"):
            if opts.get(key):
                opts[key] = _existing(opts[key], f"--{key}")
        if cfg.output != "-":
            parent = Path(cfg.output).resolve().parent
            if not parent.is_dir():
                raise ConfigError(f"output directory {parent} does not exist")
        for key in ("sigma", "ell", "nu", "sigma_e", "sigma_d", "ell_d", "nu_d",
                    "source_sigma", "source_ell", "source_nu", "gamma", "eps", "beta",
                    "sigma_c", "coarsest"):
            v = opts.get(key)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise ConfigError(f"--{key.replace('_', '-')} must be positive")
        for key in ("sigma_bounds", "ell_bounds", "sigma_e_bounds", "sigma_d_bounds", "ell_d_bounds"):
            v = opts.get(key)
            if v is not None and not 0 < v[0] < v[1]:
                raise ConfigError(f"--{key.replace('_', '-')} must satisfy 0 < lo < hi")
        if cfg.command in ("sample", "cov", "regress"):
            missing = [k for k in ("mesh", "sigma", "ell", "nu")
                       if (cfg.mesh if k == "mesh" else opts.get(k)) is None]
            if missing:
                raise ConfigError("missing " + ", ".join("--" + k for k in missing))
        return cfg


def _existing(path: str | Path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{flag}: no such file {p}")
    return p


def _resolve_mesh(spec: str, boundary: Path | None) -> Mesh:
    """A mesh file, or ``interval:a:b:n``, ``square:cells`` or ``hemisphere:level``."""
    if Path(spec).is_file():
        try:
            return load_mesh(spec, boundary=boundary)
        except MeshFormatError as exc:
            raise ConfigError(str(exc)) from None
    kind, _, rest = spec.partition(":")
    parts = rest.split(":") if rest else []
    generators = {"interval": (3, lambda a, b, n: uniform_interval(float(a), float(b), int(n))),
                  "square": (1, lambda n: rectangle_mesh(int(n), int(n))),
                  "hemisphere": (1, lambda k: hemisphere(int(k)))}
    if kind not in generators or len(parts) != generators[kind][0]:
        raise ConfigError(f"--mesh: {spec!r} is neither a file nor a known generator")
    try:
        mesh = generators[kind][1](*parts)
    except ValueError as exc:
        raise ConfigError(f"--mesh {spec!r}: {exc}") from None
    if boundary is not None:
        labels = dict(mesh.boundary)
        labels.update(read_boundary(boundary, mesh.n_nodes))
        mesh = Mesh(mesh.nodes, mesh.elements, labels)
    return mesh


# ---------------------------------------------------------------------------
# output


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _open_out(path: str):
    if path == "-":
        return _NoClose(sys.stdout)
    return open(path, "w", newline="")


class _NoClose:
    def __init__(self, fh: TextIO):
        self.fh = fh

    def __enter__(self):
        return self.fh

    def __exit__(self, *exc):
        self.fh.flush()


def write_csv(path: str, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    """Columns of equal length with a header row and full double precision."""
    data = np.column_stack([np.asarray(c, dtype=np.float64) for c in columns])
    with _open_out(path) as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_vtk(path: str, mesh: Mesh, fields: dict[str, np.ndarray], title: str = "spdefem") -> None:
    """Legacy ASCII VTK unstructured grid with one ``POINT_DATA`` scalar per field."""
    if mesh.elements.shape[1] != 3:
        raise ConfigError("VTK output needs a triangle mesh")
    nodes = mesh.nodes
    if nodes.shape[1] < 3:
        nodes = np.hstack([nodes, np.zeros((len(nodes), 3 - nodes.shape[1]))])
    el = mesh.elements
    with _open_out(path) as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(nodes)} double\n")
        for p in nodes:
            fh.write(" ".join(_fmt(v) for v in p) + "\n")
        fh.write(f"CELLS {len(el)} {4 * len(el)}\n")
        for e in el:
            fh.write(f"3 {e[0]} {e[1]} {e[2]}\n")
        fh.write(f"CELL_TYPES {len(el)}\n")
        fh.write("5\n" * len(el))
        fh.write(f"POINT_DATA {len(nodes)}\n")
        for name, values in fields.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for v in values:
                fh.write(_fmt(v) + "\n")


def write_nodal(path: str, mesh: Mesh, fields: dict[str, np.ndarray]) -> None:
    """VTK for ``.vtk`` paths on triangle meshes, otherwise CSV with node coordinates."""
    if path.endswith(".vtk"):
        write_vtk(path, mesh, fields)
        return
    coords = [f"x{i + 1}" for i in range(mesh.nodes.shape[1])]
    write_csv(path, coords + list(fields), [*mesh.nodes.T, *fields.values()])


def _worker_count() -> int:
    text = os.environ.get("SPDE_THREADS")
    if text is None:
        return os.cpu_count() or 1
    try:
        n = int(text)
    except ValueError:
        raise ConfigError(f"SPDE_THREADS must be an integer, got {text!r}") from None
    if n < 1:
        raise ConfigError("SPDE_THREADS must be at least 1")
    return n


# ---------------------------------------------------------------------------
# subcommands


def _matern(cfg: RunConfig, mesh: Mesh) -> MaternParams:
    o = cfg.options
    return MaternParams(o["sigma"], o["ell"], o["nu"], mesh.dim_param)


def cmd_sample(cfg: RunConfig) -> int:
    mesh = _resolve_mesh(cfg.mesh, cfg.boundary)
    n = cfg.options["samples"]
    if n < 1:
        raise ConfigError("--samples must be at least 1")
    field_ = build_field(mesh, _matern(cfg, mesh), cfg.m)
    draws = sample_field(field_, n, cfg.seed)
    write_nodal(cfg.output, mesh, {f"sample{k + 1}": draws[:, k] for k in range(n)})
    return EXIT_OK


def cmd_cov(cfg: RunConfig) -> int:
    mesh = _resolve_mesh(cfg.mesh, cfg.boundary)
    point = np.asarray(cfg.options["point"] or (), dtype=np.float64)
    if point.size != mesh.dim_embed:
        raise ConfigError(f"--point needs {mesh.dim_embed} coordinates")
    p = _matern(cfg, mesh)
    field_ = build_field(mesh, p, cfg.m)
    try:
        col = covariance_at_point(field_, point)
    except PointOutsideMeshError as exc:
        raise ConfigError(str(exc)) from None
    fields = {"covariance": col}
    if mesh.dim_embed == mesh.dim_param:
        r = np.linalg.norm(mesh.nodes - point[None, :], axis=1)
        fields["matern"] = matern_covariance(r, p)
    write_nodal(cfg.output, mesh, fields)
    return EXIT_OK


def _load_obs(cfg: RunConfig, mesh: Mesh) -> ObservationSet:
    path = cfg.options.get("observations")
    if path is None:
        raise ConfigError("--observations is required")
    sigma_e = cfg.options.get("sigma_e")
    if sigma_e is None:
        raise ConfigError("--sigma-e is required")
    try:
        points, Y = read_observations(path)
        return ObservationSet.at_points(mesh, points, Y, sigma_e)
    except (PointOutsideMeshError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _report_fit(result, names, trace: str | None) -> None:
    for n in names:
        print(f"{n} = {_fmt(result.params[n])}")
    print(f"log_marginal = {_fmt(result.value)}")
    print(f"evaluations = {result.n_evals}")
    if trace:
        result.write_trace(trace, names)


def cmd_regress(cfg: RunConfig) -> int:
    o = cfg.options
    mesh = _resolve_mesh(cfg.mesh, cfg.boundary)
    obs = _load_obs(cfg, mesh)
    p = _matern(cfg, mesh)
    if o["fit_hyper"]:
        names = ["sigma", "ell"] + (["sigma_e"] if o["fit_noise"] else [])
        bounds = {"sigma": o["sigma_bounds"], "ell": o["ell_bounds"],
                  "sigma_e": o["sigma_e_bounds"]}
        init = {"sigma": p.sigma, "ell": p.ell, "sigma_e": obs.sigma_e}
        for n in names:
            lo, hi = bounds[n]
            if not lo <= init[n] <= hi:
                raise ConfigError(f"initial {n} = {init[n]:g} outside its bounds")
        spec = HyperSpec(tuple(names), {n: bounds[n] for n in names})
        objective = gp_objective(mesh, obs, p.nu, cfg.m, readings=o["readings"])
        result = maximize(objective, spec, {n: init[n] for n in names}, seed=cfg.seed)
        _report_fit(result, names, o["trace"])
        p = MaternParams(result.params["sigma"], result.params["ell"], p.nu, p.d)
        obs = obs.with_noise(result.params.get("sigma_e", obs.sigma_e))
    field_ = build_field(mesh, p, cfg.m)
    post = gp_posterior_sparse(field_, obs)
    var = gp_posterior_variance_at(post, np.arange(mesh.n_nodes))
    half = 1.959963984540054 * np.sqrt(var)
    write_nodal(cfg.output, mesh, {"mean": post.mean, "variance": var,
                                   "lower95": post.mean - half, "upper95": post.mean + half})
    return EXIT_OK


def _read_dirichlet(path: Path) -> tuple[dict[str, float], list[str]]:
    """Lines ``label value [random]``."""
    values, random = {}, []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "random"):
            raise ConfigError(f"{path}:{lineno}: expected 'label value [random]'")
        try:
            values[parts[0]] = float(parts[1])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: value is not a number") from None
        if len(parts) == 3:
            random.append(parts[0])
    return values, random


def _read_source(text: str, mesh: Mesh):
    try:
        return float(text)
    except ValueError:
        pass
    path = _existing(text, "--source")
    values = np.loadtxt(path, delimiter=",", ndmin=1, comments="#")
    if values.ndim != 1 or values.size != mesh.n_nodes:
        raise ConfigError(f"--source file must hold one value per node ({mesh.n_nodes})")
    return values


def _integer_nu(nu: float | None, d: int, flag: str) -> float:
    if nu is None:
        return 2.0 - d / 2.0
    beta = nu / 2 + d / 4
    if abs(beta - round(beta)) > 1e-12:
        raise ConfigError(f"{flag} = {nu:g} gives a fractional SPDE exponent {beta:g}")
    return nu


def cmd_statfem(cfg: RunConfig) -> int:
    o = cfg.options
    if cfg.mesh is None:
        raise ConfigError("--mesh is required")
    mesh = _resolve_mesh(cfg.mesh, cfg.boundary)
    d = mesh.dim_param
    if o["dirichlet"] is None:
        raise ConfigError("--dirichlet is required")
    dirichlet, random = _read_dirichlet(o["dirichlet"])
    for key in ("source_sigma", "source_ell"):
        if o[key] is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    nu_s = _integer_nu(o["source_nu"], d, "--source-nu")
    nu_d = _integer_nu(o["nu_d"], d, "--nu-d")
    try:
        fm = assemble_forward(mesh, dirichlet, _read_source(o["source"], mesh), random,
                              o["reaction"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    prior = forward_prior(fm, build_field(mesh, MaternParams(o["source_sigma"], o["source_ell"], nu_s, d)))
    obs = _load_obs(cfg, mesh)
    if o["fit_hyper"]:
        names = ["sigma_d", "ell_d"] + (["sigma_e"] if o["fit_noise"] else [])
        bounds = {"sigma_d": o["sigma_d_bounds"], "ell_d": o["ell_d_bounds"],
                  "sigma_e": o["sigma_e_bounds"]}
        init = {"sigma_d": o["sigma_d"] or math.sqrt(bounds["sigma_d"][0] * bounds["sigma_d"][1]),
                "ell_d": o["ell_d"] or math.sqrt(bounds["ell_d"][0] * bounds["ell_d"][1]),
                "sigma_e": obs.sigma_e}
        spec = HyperSpec(tuple(names), {n: bounds[n] for n in names})
        objective = statfem_objective(prior, obs, nu_d, {"sigma_e": obs.sigma_e})
        result = maximize(objective, spec, {n: init[n] for n in names}, seed=cfg.seed)
        _report_fit(result, names, o["trace"])
        sigma_d, ell_d = result.params["sigma_d"], result.params["ell_d"]
        obs = obs.with_noise(result.params.get("sigma_e", obs.sigma_e))
    else:
        if o["sigma_d"] is None or o["ell_d"] is None:
            raise ConfigError("give --sigma-d and --ell-d, or --fit-hyper")
        sigma_d, ell_d = o["sigma_d"], o["ell_d"]
    mm = mismatch_field(mesh, sigma_d, ell_d, nu_d)
    try:
        post = statfem_posterior(prior, mm, obs)
    except ValueError as exc:
        if isinstance(exc, NUMERICAL_ERRORS):
            raise
        raise ConfigError(str(exc)) from None
    write_nodal(cfg.output, mesh, {
        "prior_mean": prior.mean,
        "prior_std": np.sqrt(prior.variance()),
        "mean": post.mean,
        "std": np.sqrt(post.variance()),
        "true_std": np.sqrt(posterior_true_variance(post, mm)),
    })
    return EXIT_OK


def cmd_convergence(cfg: RunConfig) -> int:
    o = cfg.options
    if o["levels"] < 1:
        raise ConfigError("--levels must be at least 1")
    hs = convergence_mesh_sizes(o["levels"], o["coarsest"])
    workers = min(_worker_count(), len(hs))

    def one(h):
        return covariance_convergence(o["beta"], [h], o["ell"], o["sigma_c"], cfg.m)[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, hs))
    else:
        rows = [one(h) for h in hs]
    h, eta = (np.array(c) for c in zip(*rows))
    write_csv(cfg.output, ["h", "eta"], [h, eta])
    if len(hs) > 1:
        print(f"slope = {loglog_slope(h, eta):.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_rational(cfg: RunConfig) -> int:
    o = cfg.options
    gamma = o["gamma"]
    if not 0 < gamma < 1:
        raise ConfigError("--gamma must lie in (0, 1)")
    if not 0 < o["eps"] < 1:
        raise ConfigError("--eps must lie in (0, 1)")
    approx = best_rational_approx(gamma, cfg.m, o["eps"])
    out = sys.stderr if cfg.output == "-" else sys.stdout
    print(f"gamma = {_fmt(gamma)}  m = {cfg.m}  eps = {_fmt(o['eps'])}", file=out)
    print("nodes = " + " ".join(_fmt(v) for v in approx.nodes), file=out)
    print("zeros = " + " ".join(_fmt(v) for v in approx.zeros), file=out)
    print("poles = " + " ".join(_fmt(v) for v in approx.poles), file=out)
    print(f"max_error = {_fmt(approx.max_error)}", file=out)
    print(f"converged = {approx.converged}", file=out)
    x = np.geomspace(o["eps"], 1.0, o["points"])
    write_csv(cfg.output, ["x", "error"], [x, approx.error(x)])
    if not approx.converged:
        raise RationalApproximationError(
            f"no equioscillation reached (deviation {approx.deviation:.3f})")
    return EXIT_OK


COMMANDS = {
    "sample": cmd_sample,
    "cov": cmd_cov,
    "regress": cmd_regress,
    "statfem": cmd_statfem,
    "convergence": cmd_convergence,
    "rational": cmd_rational,
}


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, mesh: bool = True, matern: bool = True) -> None:
    p.add_argument("--config", help="key = value file; flags take precedence")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("-o", "--output", default="-", help="output path, '-' for stdout")
    p.add_argument("--m", type=int, default=6, help="rational degree for fractional exponents")
    if mesh:
        p.add_argument("--mesh", help="mesh file (.off or interval) or interval:a:b:n, "
                                      "square:cells, hemisphere:level")
        p.add_argument("--boundary", help="boundary label sidecar file")
    if matern:
        p.add_argument("--sigma", type=float, help="marginal standard deviation")
        p.add_argument("--ell", type=float, help="correlation length")
        p.add_argument("--nu", type=float, help="smoothness")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spdefem", description="Matérn fields, GP regression and statFEM "
                                                 "on finite element meshes.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("sample", help="draw field samples")
    _common(p)
    p.add_argument("--samples", type=int, default=1, help="number of samples")

    p = sub.add_parser("cov", help="covariance column at a point")
    _common(p)
    p.add_argument("--point", type=_point, help="comma-separated coordinates")

    p = sub.add_parser("regress", help="GP posterior on the mesh nodes")
    _common(p)
    p.add_argument("--observations", help="CSV with x1[,x2[,x3]],y1[,...]")
    p.add_argument("--sigma-e", type=float, help="observation noise standard deviation")
    p.add_argument("--readings", choices=("shared", "independent"), default="shared",
                   help="whether repeated readings share one field realization")
    p.add_argument("--fit-hyper", action="store_true", help="maximize the marginal likelihood "
                                                           "over sigma and ell first")
    p.add_argument("--fit-noise", action="store_true", help="also fit sigma_e")
    p.add_argument("--sigma-bounds", type=_interval, default=(1e-3, 10.0))
    p.add_argument("--ell-bounds", type=_interval, default=(1e-2, 100.0))
    p.add_argument("--sigma-e-bounds", type=_interval, default=(1e-6, 10.0))
    p.add_argument("--trace", help="CSV of every objective evaluation")

    p = sub.add_parser("statfem", help="statFEM posterior of a Poisson problem")
    _common(p, matern=False)
    p.add_argument("--dirichlet", help="file with lines 'label value [random]'")
    p.add_argument("--source", default="0", help="deterministic source: constant or nodal CSV")
    p.add_argument("--reaction", type=float, default=0.0, help="zeroth-order coefficient")
    p.add_argument("--source-sigma", type=float)
    p.add_argument("--source-ell", type=float)
    p.add_argument("--source-nu", type=float, help="default gives SPDE exponent 1")
    p.add_argument("--observations", help="CSV with x1[,x2[,x3]],y1[,...]")
    p.add_argument("--sigma-e", type=float)
    p.add_argument("--sigma-d", type=float, help="mismatch standard deviation")
    p.add_argument("--ell-d", type=float, help="mismatch correlation length")
    p.add_argument("--nu-d", type=float, help="default gives SPDE exponent 1")
    p.add_argument("--fit-hyper", action="store_true", help="fit sigma_d and ell_d")
    p.add_argument("--fit-noise", action="store_true", help="also fit sigma_e")
    p.add_argument("--sigma-d-bounds", type=_interval, default=(1e-4, 10.0))
    p.add_argument("--ell-d-bounds", type=_interval, default=(1e-2, 10.0))
    p.add_argument("--sigma-e-bounds", type=_interval, default=(1e-6, 10.0))
    p.add_argument("--trace", help="CSV of every objective evaluation")

    p = sub.add_parser("convergence", help="covariance error against mesh size on an interval")
    _common(p, mesh=False, matern=False)
    p.add_argument("--beta", type=float, default=1.0, help="SPDE exponent")
    p.add_argument("--ell", type=float, default=0.05)
    p.add_argument("--sigma", dest="sigma_c", type=float, default=1.0)
    p.add_argument("--levels", type=int, default=5, help="number of halvings of the mesh size")
    p.add_argument("--coarsest", type=float, default=1 / 50)

    p = sub.add_parser("rational", help="best rational approximation of x^gamma")
    _common(p, mesh=False, matern=False)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=DEFAULT_EPS, help="lower end of the interval")
    p.add_argument("--points", type=int, default=1000, help="samples of the error curve")
    return parser


def _parse(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        raise ConfigError("no subcommand given; see --help")
    if ns.config:
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        _apply_config(sub.choices[ns.command], read_config(ns.config))
        ns = parser.parse_args(argv)
    return ns


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    here = Path(__file__).resolve().parent
    name = "spdefem"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename).resolve()
        if here in path.parents:
            name = ".".join(("spdefem", *path.relative_to(here).with_suffix("").parts))
    return name


def run(argv: Sequence[str] | None = None) -> int:
    """Execute one command and return its exit code."""
    try:
        ns = _parse(argv)
        cfg = RunConfig.from_args(ns)
        return COMMANDS[cfg.command](cfg)
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BrokenPipeError:
        # reader went away, e.g. `| head`; silence the flush at interpreter exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure in {_origin(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error in {_origin(exc)}: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
