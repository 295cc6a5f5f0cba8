"""Interval and structured triangular meshes with tagged boundary facets.

Meshes are immutable after construction.  2D rectangles are triangulated with
the diagonal mirrored about the horizontal midline, so for an even number of
rows the triangulation (not just the node set) is invariant under the
reflection y -> Ly - y; the electrolytic diode symmetry checks rely on this.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

TAGS_1D = ("left", "right")
TAGS_2D = ("bottom", "right", "top", "left")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable mesh; compared and hashed by identity so it can key caches."""

    dim: int
    nodes: np.ndarray                    # (n_nodes, dim)
    cells: np.ndarray                    # (n_cells, dim + 1) node indices
    facets: np.ndarray                   # (n_facets, dim) boundary facet nodes
    facet_tags: np.ndarray               # (n_facets,) tag strings
    structure: dict = field(default_factory=dict, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def tags(self) -> tuple[str, ...]:
        return TAGS_1D if self.dim == 1 else TAGS_2D

    def facets_for(self, tag: str) -> np.ndarray:
        if tag not in self.tags:
            raise ConfigurationError(f"unknown boundary tag {tag!r}; valid tags: {self.tags}")
        return self.facets[self.facet_tags == tag]

    def nodes_for(self, tag: str) -> np.ndarray:
        """Sorted unique node indices on the tagged boundary part."""
        return np.unique(self.facets_for(tag))

    @property
    def boundary_facets(self) -> list[tuple[tuple[int, ...], str]]:
        return [(tuple(f), t) for f, t in zip(self.facets, self.facet_tags)]

    def cell_measures(self) -> np.ndarray:
        """Cell lengths (1D) or triangle areas (2D)."""
        x = self.nodes[self.cells]
        if self.dim == 1:
            return x[:, 1, 0] - x[:, 0, 0]
        d1 = x[:, 1] - x[:, 0]
        d2 = x[:, 2] - x[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


@dataclass
class FieldOnMesh:
    """Nodal values of one or more fields on a mesh.

    `values` has shape (n_nodes, n_components); a flat vector of matching
    length is accepted and reshaped.
    """

    mesh: Mesh
    values: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            if v.size % self.mesh.n_nodes:
                raise ConfigurationError(
                    f"value count {v.size} is not a multiple of node count {self.mesh.n_nodes}"
                )
            v = v.reshape(self.mesh.n_nodes, -1)
        if v.shape[0] != self.mesh.n_nodes:
            raise ConfigurationError(
                f"expected one row per node ({self.mesh.n_nodes}), got shape {v.shape}"
            )
        self.values = v

    @property
    def n_components(self) -> int:
        return self.values.shape[1]

    @property
    def flat(self) -> np.ndarray:
        """Node-interleaved DOF vector (component index fastest)."""
        return self.values.reshape(-1)

    def component(self, k: int) -> "FieldOnMesh":
        return FieldOnMesh(self.mesh, self.values[:, k].copy())

    def copy(self) -> "FieldOnMesh":
        return FieldOnMesh(self.mesh, self.values.copy(), self.names)


def build_interval_mesh(x0: float, x1: float, n_cells: int) -> Mesh:
    """Uniform 1D mesh on [x0, x1] with boundary tags 'left' and 'right'."""
    if not x1 > x0:
        raise ConfigurationError(f"need x1 > x0, got [{x0}, {x1}]")
    if n_cells < 1:
        raise ConfigurationError("n_cells must be at least 1")
    nodes = np.linspace(x0, x1, n_cells + 1).reshape(-1, 1)
    cells = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    facets = np.array([[0], [n_cells]])
    tags = np.array(["left", "right"])
    return Mesh(1, nodes, cells, facets, tags, {"x0": x0, "x1": x1, "n": n_cells})


def build_rectangle_mesh(Lx: float, Ly: float, nx: int, ny: int) -> Mesh:
    """Structured triangulation of [0, Lx] x [0, Ly].

    Nodes are row-major with x fastest.  Each grid cell is split along one
    diagonal; rows below the horizontal midline use the rising diagonal and
    rows above the falling one, so an even ny yields a mesh symmetric under
    y -> Ly - y.
    """
    if not (Lx > 0 and Ly > 0):
        raise ConfigurationError(f"rectangle sides must be positive, got {Lx} x {Ly}")
    if nx < 1 or ny < 1:
        raise ConfigurationError("nx and ny must be at least 1")
    xs = np.linspace(0.0, Lx, nx + 1)
    ys = np.linspace(0.0, Ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)               # Y varies along axis 0
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        rising = j < ny - 1 - j or j == ny - 1 - j   # mirror row uses the rising split
        for i in range(nx):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            if rising:
                cells.append((a, b, c))
                cells.append((a, c, d))
            else:
                cells.append((a, b, d))
                cells.append((b, c, d))
    cells = np.array(cells, dtype=int)

    facets, tags = [], []
    for i in range(nx):
        facets.append((nid(i, 0), nid(i + 1, 0)))
        tags.append("bottom")
        facets.append((nid(i, ny), nid(i + 1, ny)))
        tags.append("top")
    for j in range(ny):
        facets.append((nid(0, j), nid(0, j + 1)))
        tags.append("left")
        facets.append((nid(nx, j), nid(nx, j + 1)))
        tags.append("right")
    structure = {"Lx": Lx, "Ly": Ly, "nx": nx, "ny": ny}
    return Mesh(2, nodes, np.array(cells), np.array(facets), np.array(tags), structure)


def _interp_1d(coarse: FieldOnMesh, fine: Mesh) -> np.ndarray:
    xc = coarse.mesh.nodes[:, 0]
    xf = fine.nodes[:, 0]
    tol = 1e-12
    if xf.min() < xc[0] - tol or xf.max() > xc[-1] + tol:
        raise ConfigurationError("fine mesh extends outside the coarse domain")
    xq = np.clip(xf, xc[0], xc[-1])
    cell = np.clip(np.searchsorted(xc, xq, side="right") - 1, 0, len(xc) - 2)
    t = (xq - xc[cell]) / (xc[cell + 1] - xc[cell])
    return (1 - t)[:, None] * coarse.values[cell] + t[:, None] * coarse.values[cell + 1]


def _locate_structured(mesh: Mesh, pts: np.ndarray):
    """Containing cell index and barycentric weights for points in a
    build_rectangle_mesh mesh."""
    s = mesh.structure
    nx, ny = s["nx"], s["ny"]
    hx, hy = s["Lx"] / nx, s["Ly"] / ny
    tol = 1e-12
    if (
        pts[:, 0].min() < -tol or pts[:, 0].max() > s["Lx"] + tol
        or pts[:, 1].min() < -tol or pts[:, 1].max() > s["Ly"] + tol
    ):
        raise ConfigurationError("fine mesh extends outside the coarse domain")
    x = np.clip(pts[:, 0], 0.0, s["Lx"])
    y = np.clip(pts[:, 1], 0.0, s["Ly"])
    i = np.minimum((x / hx).astype(int), nx - 1)
    j = np.minimum((y / hy).astype(int), ny - 1)
    u = x / hx - i
    v = y / hy - j
    rising = (j < ny - 1 - j) | (j == ny - 1 - j)
    # rising split: triangles (a,b,c) below the diagonal v <= u, (a,c,d) above
    # falling split: triangles (a,b,d) where u + v <= 1, (b,c,d) otherwise
    second = np.where(rising, v > u, u + v > 1.0)
    cell = 2 * (j * nx + i) + second
    lam = np.empty((len(pts), 3))
    r, f = rising, ~rising
    lo = ~second
    # barycentric weights in the local corner numbering of each triangle
    lam[r & lo, 0] = 1.0 - u[r & lo]
    lam[r & lo, 1] = u[r & lo] - v[r & lo]
    lam[r & lo, 2] = v[r & lo]
    lam[r & ~lo, 0] = 1.0 - v[r & ~lo]
    lam[r & ~lo, 1] = u[r & ~lo]
    lam[r & ~lo, 2] = v[r & ~lo] - u[r & ~lo]
    lam[f & lo, 0] = 1.0 - u[f & lo] - v[f & lo]
    lam[f & lo, 1] = u[f & lo]
    lam[f & lo, 2] = v[f & lo]
    lam[f & ~lo, 0] = 1.0 - v[f & ~lo]
    lam[f & ~lo, 1] = u[f & ~lo] + v[f & ~lo] - 1.0
    lam[f & ~lo, 2] = 1.0 - u[f & ~lo]
    return cell, lam


def _interp_2d_bruteforce(coarse: FieldOnMesh, pts: np.ndarray) -> np.ndarray:
    mesh = coarse.mesh
    out = np.empty((len(pts), coarse.n_components))
    x = mesh.nodes[mesh.cells]                      # (n_cells, 3, 2)
    d1 = x[:, 1] - x[:, 0]
    d2 = x[:, 2] - x[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    tol = 1e-12
    for k, pt in enumerate(pts):
        r = pt - x[:, 0]
        l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
        l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        hits = np.nonzero(inside)[0]
        if len(hits) == 0:
            raise ConfigurationError(f"point {pt} lies outside the coarse mesh")
        c = hits[0]
        lam = np.array([l0[c], l1[c], l2[c]])
        out[k] = lam @ coarse.values[mesh.cells[c]]
    return out


def interpolate_p1(coarse: FieldOnMesh, fine: Mesh) -> FieldOnMesh:
    """Evaluate the piecewise-linear coarse field at the fine mesh nodes."""
    if coarse.mesh.dim != fine.dim:
        raise ConfigurationError("mesh dimensions differ")
    if fine.dim == 1:
        values = _interp_1d(coarse, fine)
    elif coarse.mesh.structure.get("nx"):
        cell, lam = _locate_structured(coarse.mesh, fine.nodes)
        corner = coarse.values[coarse.mesh.cells[cell]]   # (n_pts, 3, n_comp)
        values = np.einsum("pk,pkc->pc", lam, corner)
    else:
        values = _interp_2d_bruteforce(coarse, fine.nodes)
    return FieldOnMesh(fine, values, coarse.names)


def dump_mesh_csv(mesh: Mesh, directory: str | Path) -> list[Path]:
    """Debug dump: nodes.csv, cells.csv, facets.csv in the given directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    coords = ["x", "y"][: mesh.dim]
    path = directory / "nodes.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", *coords])
        for k, row in enumerate(mesh.nodes):
            w.writerow([k, *[repr(float(c)) for c in row]])
    paths.append(path)
    path = directory / "cells.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", *[f"n{k}" for k in range(mesh.dim + 1)]])
        for k, row in enumerate(mesh.cells):
            w.writerow([k, *map(int, row)])
    paths.append(path)
    path = directory / "facets.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*[f"n{k}" for k in range(mesh.dim)], "tag"])
        for row, tag in zip(mesh.facets, mesh.facet_tags):
            w.writerow([*map(int, row), tag])
    paths.append(path)
    return paths
