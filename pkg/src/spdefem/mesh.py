"""Linear simplicial meshes, file loading and finite element assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .sparsela import canonical, diag_matrix

DEGENERATE_TOL = 1e-14
BARYCENTRIC_TOL = 1e-10


class MeshFormatError(ValueError):
    """A mesh or sidecar file could not be parsed."""

    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.line = line


class PointOutsideMeshError(ValueError):
    def __init__(self, index: int, nearest: int):
        super().__init__(f"point {index} lies outside the mesh (nearest element {nearest})")
        self.index = index
        self.nearest = nearest


@dataclass(frozen=True, eq=False)
class Mesh:
    """Mesh of linear segments or triangles, possibly embedded in a higher dimension.

    Parameters
    ----------
    nodes : (n_nodes, dim_embed) array
    elements : (n_elements, dim_param + 1) int array
    boundary : dict of label -> node index array
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        elements = np.asarray(self.elements, dtype=np.int64)
        if elements.ndim != 2 or elements.shape[1] not in (2, 3):
            raise ValueError("elements must be segments (2 nodes) or triangles (3 nodes)")
        if nodes.shape[1] not in (1, 2, 3):
            raise ValueError("nodes must have 1, 2 or 3 coordinates")
        if elements.shape[1] - 1 > nodes.shape[1]:
            raise ValueError("embedding dimension smaller than element dimension")
        if elements.size and (elements.min() < 0 or elements.max() >= len(nodes)):
            bad = int(np.flatnonzero((elements < 0).any(1) | (elements >= len(nodes)).any(1))[0])
            raise ValueError(f"element {bad} references a node that does not exist")
        boundary = {
            str(k): np.unique(np.asarray(v, dtype=np.int64)) for k, v in self.boundary.items()
        }
        for label, idx in boundary.items():
            if idx.size and (idx.min() < 0 or idx.max() >= len(nodes)):
                raise ValueError(f"boundary set {label!r} references a missing node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "boundary", boundary)
        small = np.flatnonzero(self.measures <= DEGENERATE_TOL)
        if small.size:
            raise ValueError(f"element {int(small[0])} is degenerate")

    @property
    def dim_param(self) -> int:
        return self.elements.shape[1] - 1

    @property
    def dim_embed(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @cached_property
    def jacobians(self) -> np.ndarray:
        """Edge vectors from the first vertex, shape (n_el, dim_embed, dim_param)."""
        x = self.nodes[self.elements]
        return np.transpose(x[:, 1:, :] - x[:, :1, :], (0, 2, 1))

    @cached_property
    def metrics(self) -> np.ndarray:
        """Metric tensors ``G = JᵀJ``."""
        j = self.jacobians
        return np.einsum("eki,ekj->eij", j, j)

    @cached_property
    def measures(self) -> np.ndarray:
        """Element lengths or areas."""
        g = self.metrics
        det = np.linalg.det(g) if g.shape[1] > 1 else g[:, 0, 0]
        return np.sqrt(np.maximum(det, 0.0)) / math.factorial(self.dim_param)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @property
    def measure(self) -> float:
        return float(self.measures.sum())

    def edges(self) -> np.ndarray:
        """Unique edges as sorted node pairs."""
        k = self.elements.shape[1]
        pairs = np.concatenate(
            [self.elements[:, [a, b]] for a in range(k) for b in range(a + 1, k)]
        )
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def mean_edge_length(self) -> float:
        e = self.edges()
        return float(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).mean())

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes).tobytes())
        h.update(np.ascontiguousarray(self.elements).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class CoefficientField:
    """Spatially varying SPDE coefficients.

    Each callable takes an ``(n, dim_embed)`` array of points.  ``kappa2`` and
    ``tau`` return ``(n,)`` arrays, ``diffusion`` returns ``(n, dim_embed,
    dim_embed)`` symmetric positive definite matrices.  ``diffusion=None`` means
    the identity.
    """

    kappa2: Callable[[np.ndarray], np.ndarray]
    tau: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def constant(cls, kappa2: float, tau: float = 1.0, diffusion: np.ndarray | None = None):
        def k2(x):
            return np.full(len(x), float(kappa2))

        def t(x):
            return np.full(len(x), float(tau))

        h = None
        if diffusion is not None:
            hm = np.atleast_2d(np.asarray(diffusion, dtype=np.float64))

            def h(x):
                return np.broadcast_to(hm, (len(x),) + hm.shape)

        return cls(k2, t, h)

    def kappa2_at(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.kappa2(np.atleast_2d(x)), dtype=np.float64)

    def tau_at(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.tau(np.atleast_2d(x)), dtype=np.float64)

    def diffusion_at(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.diffusion is None:
            return np.broadcast_to(np.eye(x.shape[1]), (len(x), x.shape[1], x.shape[1]))
        h = np.asarray(self.diffusion(x), dtype=np.float64)
        if h.ndim == 2:
            h = h[None]
        if not np.allclose(h, np.transpose(h, (0, 2, 1)), rtol=1e-12, atol=1e-14):
            raise ValueError("diffusion tensor is not symmetric")
        if h.shape[-1] > 0 and np.linalg.eigvalsh(h).min() <= 0.0:
            raise ValueError("diffusion tensor is not positive definite")
        return h


# ---------------------------------------------------------------------------
# file formats


def _read_interval(path: Path) -> Mesh:
    lines = [
        (i + 1, ln) for i, ln in enumerate(path.read_text().splitlines()) if ln.strip()
        and not ln.lstrip().startswith("#")
    ]
    if len(lines) != 1:
        raise MeshFormatError(path, lines[1][0] if len(lines) > 1 else None,
                              "interval file must hold exactly one line of coordinates")
    lineno, text = lines[0]
    try:
        x = np.array([float(t) for t in text.replace(",", " ").split()])
    except ValueError as exc:
        raise MeshFormatError(path, lineno, str(exc)) from None
    if x.size < 2:
        raise MeshFormatError(path, lineno, "need at least two coordinates")
    if not np.all(np.diff(x) > 0):
        raise MeshFormatError(path, lineno, "coordinates must be strictly increasing")
    return interval_mesh(x)


def _read_off(path: Path) -> Mesh:
    raw = path.read_text().splitlines()
    lines = []
    for i, ln in enumerate(raw):
        text = ln.split("#", 1)[0].strip()
        if text:
            lines.append((i + 1, text))
    if not lines:
        raise MeshFormatError(path, None, "empty file")
    pos = 0
    lineno, text = lines[pos]
    if not text.startswith("OFF"):
        raise MeshFormatError(path, lineno, "missing OFF header")
    rest = text[3:].split()
    if not rest:
        pos += 1
        if pos >= len(lines):
            raise MeshFormatError(path, lineno, "missing count line")
        lineno, text = lines[pos]
        rest = text.split()
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise MeshFormatError(path, lineno, "expected vertex, face and edge counts") from None
    pos += 1
    if len(lines) < pos + nv + nf:
        raise MeshFormatError(path, lines[-1][0], "file ends before all vertices and faces are read")
    nodes = np.empty((nv, 3))
    for k in range(nv):
        lineno, text = lines[pos + k]
        try:
            vals = [float(t) for t in text.split()]
        except ValueError:
            raise MeshFormatError(path, lineno, "invalid vertex coordinate") from None
        if len(vals) != 3:
            raise MeshFormatError(path, lineno, "vertex needs three coordinates")
        nodes[k] = vals
    pos += nv
    tris = np.empty((nf, 3), dtype=np.int64)
    for k in range(nf):
        lineno, text = lines[pos + k]
        try:
            vals = [int(t) for t in text.split()]
        except ValueError:
            raise MeshFormatError(path, lineno, "invalid face entry") from None
        if not vals or vals[0] != 3 or len(vals) < 4:
            raise MeshFormatError(path, lineno, "only triangular faces are supported")
        if min(vals[1:4]) < 0 or max(vals[1:4]) >= nv:
            raise MeshFormatError(path, lineno, "face references a missing vertex")
        tris[k] = vals[1:4]
    # flat meshes stored with z = 0 are treated as planar
    if nv and np.all(nodes[:, 2] == 0.0):
        nodes = nodes[:, :2]
    try:
        return Mesh(nodes, tris)
    except ValueError as exc:
        raise MeshFormatError(path, None, str(exc)) from None


def read_boundary(path: str | Path, n_nodes: int | None = None) -> dict[str, np.ndarray]:
    """Read a sidecar file with lines ``label: i1 i2 ...``."""
    path = Path(path)
    out: dict[str, list[int]] = {}
    for i, ln in enumerate(path.read_text().splitlines()):
        text = ln.split("#", 1)[0].strip()
        if not text:
            continue
        if ":" not in text:
            raise MeshFormatError(path, i + 1, "expected 'label: indices'")
        label, idx = text.split(":", 1)
        try:
            vals = [int(t) for t in idx.split()]
        except ValueError:
            raise MeshFormatError(path, i + 1, "node indices must be integers") from None
        if n_nodes is not None and any(v < 0 or v >= n_nodes for v in vals):
            raise MeshFormatError(path, i + 1, "node index out of range")
        out.setdefault(label.strip(), []).extend(vals)
    return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}


def load_mesh(path: str | Path, format: str | None = None, boundary: str | Path | None = None) -> Mesh:
    """Load a mesh file.

    Parameters
    ----------
    path : path-like
    format : {"interval", "off"}, optional
        Inferred from the suffix (``.off`` or anything else as interval) when omitted.
    boundary : path-like, optional
        Sidecar file with labelled node sets.
    """
    path = Path(path)
    fmt = (format or ("off" if path.suffix.lower() == ".off" else "interval")).lower()
    if fmt == "interval":
        mesh = _read_interval(path)
    elif fmt == "off":
        mesh = _read_off(path)
    else:
        raise ValueError(f"unknown mesh format {format!r}")
    if boundary is not None:
        labels = dict(mesh.boundary)
        labels.update(read_boundary(boundary, mesh.n_nodes))
        mesh = Mesh(mesh.nodes, mesh.elements, labels)
    return mesh


def write_off(path: str | Path, mesh: Mesh) -> None:
    nodes = mesh.nodes
    if nodes.shape[1] < 3:
        nodes = np.hstack([nodes, np.zeros((len(nodes), 3 - nodes.shape[1]))])
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_nodes} {mesh.n_elements} 0\n")
        for p in nodes:
            fh.write(" ".join(repr(float(v)) for v in p) + "\n")
        for e in mesh.elements:
            fh.write("3 " + " ".join(str(int(v)) for v in e) + "\n")


# ---------------------------------------------------------------------------
# generators


def interval_mesh(x: np.ndarray) -> Mesh:
    """Segment mesh through the given increasing coordinates."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    el = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return Mesh(x[:, None], el, {"left": np.array([0]), "right": np.array([n - 1])})


def uniform_interval(a: float, b: float, n_nodes: int) -> Mesh:
    return interval_mesh(np.linspace(a, b, n_nodes))


def rectangle_mesh(nx: int, ny: int, x0=(0.0, 0.0), x1=(1.0, 1.0)) -> Mesh:
    """Structured triangulation of a rectangle with ``nx`` by ``ny`` cells.

    Boundary labels are ``left``, ``right``, ``bottom`` and ``top``.
    """
    xs = np.linspace(x0[0], x1[0], nx + 1)
    ys = np.linspace(x0[1], x1[1], ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    # alternate the diagonal direction to avoid a directional bias
    flip = ((np.arange(ny)[:, None] + np.arange(nx)[None, :]) % 2).ravel().astype(bool)
    t1 = np.where(flip[:, None], np.column_stack([a, b, d]), np.column_stack([a, b, c]))
    t2 = np.where(flip[:, None], np.column_stack([b, c, d]), np.column_stack([a, c, d]))
    elements = np.concatenate([t1, t2])
    boundary = {
        "left": idx[:, 0],
        "right": idx[:, -1],
        "bottom": idx[0, :],
        "top": idx[-1, :],
    }
    return Mesh(nodes, elements, boundary)


def refine(mesh: Mesh, project: Callable[[np.ndarray], np.ndarray] | None = None) -> Mesh:
    """Uniform refinement: segments are halved, triangles split into four.

    New nodes are appended after the existing ones, so coarse node indices are
    preserved.  ``project`` optionally maps new midpoints onto a curved surface.
    Boundary sets gain the midpoints of edges whose endpoints both belong to the set.
    """
    el = mesh.elements
    k = el.shape[1]
    n = mesh.n_nodes
    if k == 2:
        pairs = el
    else:
        pairs = np.concatenate([el[:, [0, 1]], el[:, [1, 2]], el[:, [2, 0]]])
    key = np.sort(pairs, axis=1)
    edges, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    mids = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    if project is not None:
        mids = project(mids)
    nodes = np.vstack([mesh.nodes, mids])
    mid_id = n + inverse
    if k == 2:
        m = mid_id
        new_el = np.concatenate([np.column_stack([el[:, 0], m]), np.column_stack([m, el[:, 1]])])
    else:
        ne = el.shape[0]
        m01, m12, m20 = mid_id[:ne], mid_id[ne:2 * ne], mid_id[2 * ne:]
        new_el = np.concatenate([
            np.column_stack([el[:, 0], m01, m20]),
            np.column_stack([m01, el[:, 1], m12]),
            np.column_stack([m20, m12, el[:, 2]]),
            np.column_stack([m01, m12, m20]),
        ])
    boundary = {}
    for label, idx in mesh.boundary.items():
        inside = np.zeros(n, dtype=bool)
        inside[idx] = True
        both = inside[edges[:, 0]] & inside[edges[:, 1]]
        boundary[label] = np.concatenate([idx, n + np.flatnonzero(both)])
    return Mesh(nodes, new_el, boundary)


def _to_sphere(radius: float):
    def project(x):
        return radius * x / np.linalg.norm(x, axis=1, keepdims=True)

    return project


def icosahedron(radius: float = 1.0) -> Mesh:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v *= radius / np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return Mesh(v, f)


def icosphere(level: int, radius: float = 1.0) -> Mesh:
    mesh = icosahedron(radius)
    for _ in range(level):
        mesh = refine(mesh, _to_sphere(radius))
    return mesh


def hemisphere(level: int, radius: float = 1.0) -> Mesh:
    """Upper hemisphere ``z >= 0`` from recursively subdivided octahedron faces.

    Level ``k`` has ``2·4^k + 2^(k+1) + 1`` nodes (5, 13, 41, 145, 545, ...) and
    every coarser level's nodes are a prefix of the finer ones.  The equator is
    labelled ``rim``.
    """
    v = radius * np.array([
        [1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0], [0, 0, 1],
    ], dtype=np.float64)
    f = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    mesh = Mesh(v, f, {"rim": np.arange(4)})
    for _ in range(level):
        mesh = refine(mesh, _to_sphere(radius))
    return mesh


# ---------------------------------------------------------------------------
# assembly


def _reference_gradients(k: int) -> np.ndarray:
    """Derivatives of the barycentric basis w.r.t. the reference coordinates."""
    if k == 2:
        return np.array([[-1.0], [1.0]])
    return np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def _element_mass(mesh: Mesh) -> np.ndarray:
    k = mesh.elements.shape[1]
    base = (np.ones((k, k)) + np.eye(k)) / ((k) * (k + 1))
    return mesh.measures[:, None, None] * base[None]


def _scatter(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    el = mesh.elements
    k = el.shape[1]
    rows = np.repeat(el, k, axis=1).ravel()
    cols = np.tile(el, (1, k)).ravel()
    m = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return canonical(m.tocsr())


def assemble_mass(mesh: Mesh, lumped: bool = False) -> sp.csr_matrix:
    """Mass matrix ``∫ φ_i φ_j``; the lumped variant is the diagonal of row sums."""
    if lumped:
        return diag_matrix(lumped_mass(mesh))
    return _scatter(mesh, _element_mass(mesh))


def lumped_mass(mesh: Mesh) -> np.ndarray:
    """Diagonal of the lumped mass matrix as a vector."""
    k = mesh.elements.shape[1]
    return np.bincount(
        mesh.elements.ravel(), weights=np.repeat(mesh.measures / k, k), minlength=mesh.n_nodes
    )


def _contravariant_tensor(mesh: Mesh, h: np.ndarray | None) -> np.ndarray:
    """Per element, the matrix contracting reference gradients.

    Isotropic: ``G⁻¹``.  With a diffusion tensor ``H`` in embedding coordinates:
    ``TᵀHT`` with ``T = J G⁻¹`` holding the contravariant basis vectors.
    """
    ginv = np.linalg.inv(mesh.metrics)
    if h is None:
        return ginv
    t = np.einsum("eki,eij->ekj", mesh.jacobians, ginv)
    return np.einsum("eki,ekl,elj->eij", t, h, t)


def assemble_stiffness(mesh: Mesh, coeff: CoefficientField | None = None) -> sp.csr_matrix:
    """SPDE operator matrix ``∫ κ² φ_i φ_j + ∇φ_i · H ∇φ_j``.

    Coefficients are evaluated once per element at its centroid; the κ² term
    uses the exact element mass.  ``coeff=None`` gives the plain stiffness matrix
    (κ² = 0, H = I).
    """
    if np.any(np.linalg.det(mesh.metrics) <= 0.0):
        raise ValueError("singular element metric")
    d = _reference_gradients(mesh.elements.shape[1])
    if coeff is None:
        k2 = np.zeros(mesh.n_elements)
        h = None
    else:
        c = mesh.centroids
        k2 = coeff.kappa2_at(c)
        h = None if coeff.diffusion is None else coeff.diffusion_at(c)
        if np.any(k2 < 0):
            raise ValueError("kappa² must be non-negative")
    a = _contravariant_tensor(mesh, h)
    local = np.einsum("ia,eab,jb->eij", d, a, d) * mesh.measures[:, None, None]
    if np.any(k2 != 0):
        local = local + k2[:, None, None] * _element_mass(mesh)
    return _scatter(mesh, local)


def barycentric(mesh: Mesh, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric coordinates of ``x`` in every element and the distance to each element's plane."""
    x = np.asarray(x, dtype=np.float64)
    j = mesh.jacobians
    x0 = mesh.nodes[mesh.elements[:, 0]]
    r = x[None, :] - x0
    ginv = np.linalg.inv(mesh.metrics)
    xi = np.einsum("eij,ekj,ek->ei", ginv, j, r)
    lam = np.column_stack([1.0 - xi.sum(axis=1), xi])
    resid = r - np.einsum("eki,ei->ek", j, xi)
    return lam, np.linalg.norm(resid, axis=1)


def observation_matrix(mesh: Mesh, points: np.ndarray, tol: float = BARYCENTRIC_TOL) -> sp.csr_matrix:
    """Matrix of basis function values at ``points`` (one row per point).

    Each point is located by an exhaustive element scan; ties on shared edges
    go to the lowest-index element.  Points on embedded surfaces must lie within
    a small distance (1e-8 relative to element size) of the element plane.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None] if mesh.dim_embed == 1 else pts[None, :]
    if pts.shape[1] != mesh.dim_embed:
        raise ValueError(f"points have {pts.shape[1]} coordinates, mesh has {mesh.dim_embed}")
    size = np.sqrt(mesh.measures) if mesh.dim_param == 2 else mesh.measures
    node_index = {tuple(p): i for i, p in enumerate(mesh.nodes)}
    rows, cols, vals = [], [], []
    for i, p in enumerate(pts):
        hit = node_index.get(tuple(p))
        if hit is not None:
            rows.append(i)
            cols.append(hit)
            vals.append(1.0)
            continue
        lam, dist = barycentric(mesh, p)
        ok = (lam.min(axis=1) >= -tol) & (dist <= 1e-8 * size)
        found = np.flatnonzero(ok)
        if found.size == 0:
            score = np.maximum(-lam.min(axis=1), 0.0) + dist / size
            raise PointOutsideMeshError(i, int(np.argmin(score)))
        e = int(found[0])
        w = np.clip(lam[e], 0.0, None)
        w /= w.sum()
        for node, v in zip(mesh.elements[e], w):
            if v > 0.0:
                rows.append(i)
                cols.append(int(node))
                vals.append(float(v))
    m = sp.coo_matrix((vals, (rows, cols)), shape=(len(pts), mesh.n_nodes))
    return canonical(m.tocsr())
