"""P1 assembly of the coupled nonlinear residual and its exact Jacobian.

The unknowns are node-interleaved [phi, p, y_1..y_{N-1}].  The weak form
integrates, per test-function class,

  phi:  grad(phi).grad(v) - (1/lambda^2) nF v           - boundary data,
  p:    (grad(p) + (1/a^2) nF grad(phi)).grad(v)        - boundary data,
  y_a:  grad(w_a).grad(v)                               - boundary data,

with the flux potential gradient expanded by the chain rule,

  grad(w_a) = (dw_a/dp) grad(p) + (1/y_a) grad(y_a)
              + (1/y_s) sum_b grad(y_b) + z_a grad(phi).

Coefficients are evaluated at quadrature points from the interpolated
nodal state: 3-point Gauss per interval (the stiff layer nonlinearities
integrated this accurately keep the coarse-mesh solutions second order),
edge midpoints (degree 2) per triangle.  The Jacobian differentiates this
residual exactly.  The sparsity pattern is fixed for a given mesh and
field count, so the CSR structure and the scatter maps are built once and
reused; each assembly only refills the data array.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import physics
from .errors import ConfigurationError, FeasibilityError
from .mesh import FieldOnMesh, Mesh
from .physics import EPS_Y, Mixture

PHI = 0
PRESSURE = 1


def fraction_field(k: int) -> int:
    """DOF field index of charged-species fraction k (0-based)."""
    return 2 + k


@dataclass(frozen=True)
class DofMap:
    n_nodes: int
    n_fields: int

    @property
    def n_dofs(self) -> int:
        return self.n_nodes * self.n_fields

    def index(self, nodes, field_index: int):
        return np.asarray(nodes) * self.n_fields + field_index


@dataclass(frozen=True)
class BoundaryConditionSet:
    """Per-field Dirichlet values and Neumann flux data, keyed by facet tag.

    Values are constants or callables taking an (n, dim) coordinate array.
    `pins` prescribe a field value at the node nearest the given point; they
    count as Dirichlet constraints (used to gauge-fix the pressure in 2D).
    """

    dirichlet: dict[tuple[str, int], object] = field(default_factory=dict)
    neumann: dict[tuple[str, int], object] = field(default_factory=dict)
    pins: tuple[tuple[int, tuple[float, ...], float], ...] = ()

    def __post_init__(self):
        fields = {f for _, f in (*self.dirichlet, *self.neumann)}
        for f in fields:
            dtags = {t for t, ff in self.dirichlet if ff == f}
            ntags = {t for t, ff in self.neumann if ff == f}
            overlap = dtags & ntags
            if overlap:
                raise ConfigurationError(
                    f"field {f} has both Dirichlet and Neumann data on tags {sorted(overlap)}"
                )


@dataclass
class AssembledSystem:
    residual: np.ndarray
    jacobian: sp.csr_matrix
    dofmap: DofMap
    structure: dict = field(default=None, repr=False)   # sparsity-pattern cache entry

    def jacobian_csr(self) -> sp.csr_matrix:
        return self.jacobian


# ---------------------------------------------------------------------------
# cached geometry and sparsity structure

_workspaces: "weakref.WeakKeyDictionary[Mesh, dict]" = weakref.WeakKeyDictionary()

_GAUSS_1D = (
    np.array([0.5 - 0.5 * np.sqrt(3.0 / 5.0), 0.5, 0.5 + 0.5 * np.sqrt(3.0 / 5.0)]),
    np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0]),
)
_MIDEDGE_2D = (np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]), np.array([1.0, 1.0, 1.0]) / 6.0)


def _workspace(mesh: Mesh) -> dict:
    ws = _workspaces.get(mesh)
    if ws is not None:
        return ws
    cells = mesh.cells
    coords = mesh.nodes[cells]                     # (c, loc, dim)
    if mesh.dim == 1:
        qp, qw = _GAUSS_1D
        N = np.column_stack([1.0 - qp, qp])        # (q, loc)
        h = coords[:, 1, 0] - coords[:, 0, 0]
        if (h <= 0).any():
            raise ConfigurationError("1D cells must have positive length")
        grads = np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]   # (c, loc, 1)
        wq = qw[None, :] * h[:, None]              # (c, q)
    else:
        qp, qw = _MIDEDGE_2D
        N = np.column_stack([1.0 - qp[:, 0] - qp[:, 1], qp[:, 0], qp[:, 1]])
        d1 = coords[:, 1] - coords[:, 0]
        d2 = coords[:, 2] - coords[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if (det <= 0).any():
            raise ConfigurationError("triangles must be positively oriented")
        inv = np.empty((len(det), 2, 2))
        inv[:, 0, 0] = d2[:, 1] / det
        inv[:, 0, 1] = -d2[:, 0] / det
        inv[:, 1, 0] = -d1[:, 1] / det
        inv[:, 1, 1] = d1[:, 0] / det
        gref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])     # (loc, dim)
        grads = np.einsum("ld,cde->cle", gref, inv)
        wq = qw[None, :] * det[:, None]
    gg = np.einsum("cid,cjd->cij", grads, grads)
    mass_ref = np.einsum("qi,qj->qij", N, N)
    ws = {
        "cells": cells, "N": N, "grads": grads, "wq": wq, "gg": gg,
        "mass_ref": mass_ref, "structures": {},
    }
    _workspaces[mesh] = ws
    return ws


def _block_list(n_ion: int, compressible: bool) -> list[tuple[int, int]]:
    blocks = [(PHI, PHI)]
    if compressible:
        blocks.append((PHI, PRESSURE))
    blocks += [(PHI, 2 + g) for g in range(n_ion)]
    blocks += [(PRESSURE, PRESSURE), (PRESSURE, PHI)]
    blocks += [(PRESSURE, 2 + g) for g in range(n_ion)]
    for a in range(n_ion):
        blocks += [(2 + a, PHI), (2 + a, PRESSURE)]
        blocks += [(2 + a, 2 + g) for g in range(n_ion)]
    return blocks


def _structure(mesh: Mesh, n_fields: int, compressible: bool) -> dict:
    """CSR pattern plus the scatter map from block-ordered cell entries."""
    ws = _workspace(mesh)
    key = (n_fields, compressible)
    st = ws["structures"].get(key)
    if st is not None:
        return st
    cells = ws["cells"]
    n_loc = cells.shape[1]
    n_dofs = mesh.n_nodes * n_fields
    blocks = _block_list(n_fields - 2, compressible)
    rows_parts, cols_parts = [], []
    for fi, fj in blocks:
        ri = np.repeat(cells * n_fields + fi, n_loc, axis=1)     # (c, loc*loc), i slow
        ci = np.tile(cells * n_fields + fj, (1, n_loc))          # (c, loc*loc), j fast
        rows_parts.append(ri.ravel())
        cols_parts.append(ci.ravel())
    rows = np.concatenate(rows_parts)
    cols = np.concatenate(cols_parts)
    order = np.lexsort((cols, rows))
    sr, sc = rows[order], cols[order]
    first = np.empty(len(sr), dtype=bool)
    first[0] = True
    first[1:] = (sr[1:] != sr[:-1]) | (sc[1:] != sc[:-1])
    group = np.cumsum(first) - 1
    slot = np.empty(len(rows), dtype=np.int64)
    slot[order] = group
    indices = sc[first]
    counts = np.bincount(sr[first], minlength=n_dofs)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    dof_idx = cells[:, :, None] * n_fields + np.arange(n_fields)[None, None, :]
    st = {
        "blocks": blocks,
        "slot": slot,
        "indices": indices.astype(np.int32),
        "indptr": indptr.astype(np.int32),
        "nnz": int(group[-1]) + 1,
        "dof_idx": dof_idx.ravel(),
        "bc_plans": {},
        "n_dofs": n_dofs,
    }
    ws["structures"][key] = st
    return st


def _eval_bc(value, coords: np.ndarray) -> np.ndarray:
    if callable(value):
        return np.asarray(value(coords), dtype=float) * np.ones(len(coords))
    return np.full(len(coords), float(value))


def dirichlet_dofs_values(mesh: Mesh, bcs: BoundaryConditionSet, n_fields: int):
    """Constrained DOF indices and their prescribed values (first entry wins
    on nodes shared by several tags)."""
    dm = DofMap(mesh.n_nodes, n_fields)
    seen: dict[int, float] = {}
    for (tag, f), value in bcs.dirichlet.items():
        nodes = mesh.nodes_for(tag)
        vals = _eval_bc(value, mesh.nodes[nodes])
        for d, v in zip(dm.index(nodes, f), vals):
            seen.setdefault(int(d), float(v))
    for f, point, value in bcs.pins:
        node = int(np.argmin(np.linalg.norm(mesh.nodes - np.asarray(point), axis=1)))
        seen.setdefault(int(dm.index(node, f)), float(value))
    if not seen:
        return np.array([], dtype=int), np.array([])
    dofs = np.array(sorted(seen), dtype=int)
    return dofs, np.array([seen[d] for d in dofs])


def _check_admissible(u: np.ndarray, y_n: np.ndarray, mixture: Mixture):
    y = u[:, :, 2:]
    bad_q = (y < EPS_Y).any(axis=2) | (y > 1.0 - EPS_Y).any(axis=2)
    bad_q |= (y_n < EPS_Y) | (y_n > 1.0 - EPS_Y)
    if not mixture.incompressible:
        K = mixture.compressibility.K
        bad_q |= 1.0 + (u[:, :, PRESSURE] - 1.0) / K <= 0.0
    bad = bad_q.any(axis=1)
    if bad.any():
        cell = int(np.nonzero(bad)[0][0])
        raise FeasibilityError(
            f"inadmissible state at a quadrature point of cell {cell}", cell=cell
        )


def assemble_system(
    state: FieldOnMesh, mesh: Mesh, mixture: Mixture, bcs: BoundaryConditionSet,
    check_admissible: bool = True,
) -> AssembledSystem:
    """Assemble the residual and exact Jacobian, including Neumann terms.

    Dirichlet rows are untouched here; apply_boundary_conditions replaces
    them afterwards.  The integrands only involve reciprocals of the
    fractions (never logarithms), so `check_admissible=False` permits
    evaluation at states with mild negative excursions, which trust-region
    rescues need.
    """
    n_ion = mixture.n_ions
    n_fields = n_ion + 2
    if state.n_components != n_fields:
        raise ConfigurationError(
            f"state has {state.n_components} components, mixture needs {n_fields}"
        )
    dm = DofMap(mesh.n_nodes, n_fields)
    ws = _workspace(mesh)
    st = _structure(mesh, n_fields, not mixture.incompressible)
    cells, N, grads, wq, gg, mass_ref = (
        ws["cells"], ws["N"], ws["grads"], ws["wq"], ws["gg"], ws["mass_ref"],
    )
    n_loc = cells.shape[1]

    vals = state.values[cells]                             # (c, loc, f)
    u = np.einsum("ql,clf->cqf", N, vals)                  # (c, q, f)
    grad = np.einsum("cld,clf->cfd", grads, vals)          # (c, f, d); P1 gradients are cell-constant
    # the solvent fraction interpolates from its nodal values: recomputing
    # 1 - sum(y) at quadrature points would cancel catastrophically in
    # saturated regions
    y_n_nodal = 1.0 - state.values[:, 2:].sum(axis=1)
    y_n = np.einsum("ql,cl->cq", N, y_n_nodal[cells])      # (c, q)
    if check_admissible:
        _check_admissible(u, y_n, mixture)

    p = u[:, :, PRESSURE]                                  # (c, q)
    y = u[:, :, 2:]                                        # (c, q, a)
    grad_phi = grad[:, PHI]                                # (c, d)
    grad_p = grad[:, PRESSURE]
    grad_y = grad[:, 2:]                                   # (c, a, d)
    sum_grad_y = grad_y.sum(axis=1)                        # (c, d)

    z = mixture.charges
    kap = mixture.kappas
    n_dens = physics.number_density(p, mixture)
    n_dp = physics.number_density_dp(p, mixture)
    zy = y @ z
    nF = n_dens * zy
    inv_l2 = 1.0 / mixture.lambda2
    inv_a2 = 1.0 / mixture.a2
    d_p = kap[None, None, :] * mixture.a2 / n_dens[:, :, None]          # dw/dp      (c, q, a)
    d_pp = -kap[None, None, :] * mixture.a2 * n_dp[:, :, None] / n_dens[:, :, None] ** 2

    # --- residual ---------------------------------------------------------
    # flux vectors G (c, q, f, d) and sources S (c, q, f)
    G = np.zeros((*p.shape, n_fields, grads.shape[2]))
    S = np.zeros((*p.shape, n_fields))
    G[:, :, PHI, :] = grad_phi[:, None, :]
    S[:, :, PHI] = -inv_l2 * nF
    G[:, :, PRESSURE, :] = grad_p[:, None, :] + inv_a2 * nF[:, :, None] * grad_phi[:, None, :]
    inv_y = 1.0 / y
    inv_yn = 1.0 / y_n
    for a in range(n_ion):
        G[:, :, 2 + a, :] = (
            d_p[:, :, a, None] * grad_p[:, None, :]
            + inv_y[:, :, a, None] * grad_y[:, None, a, :]
            + inv_yn[:, :, None] * sum_grad_y[:, None, :]
            + z[a] * grad_phi[:, None, :]
        )
    r_local = np.einsum("cq,cqfd,cid->cif", wq, G, grads)
    r_local += np.einsum("cq,cqf,qi->cif", wq, S, N)
    residual = np.bincount(st["dof_idx"], weights=r_local.ravel(), minlength=dm.n_dofs)

    # Neumann facet terms: subtract integral of h * v over the tagged part
    for (tag, f), value in bcs.neumann.items():
        facets = mesh.facets_for(tag)
        if len(facets) == 0:
            continue
        if mesh.dim == 1:
            xb = mesh.nodes[facets[:, 0]]
            h = _eval_bc(value, xb)
            np.subtract.at(residual, dm.index(facets[:, 0], f), h)
        else:
            pts = mesh.nodes[facets]                       # (e, 2, 2)
            mid = pts.mean(axis=1)
            length = np.linalg.norm(pts[:, 1] - pts[:, 0], axis=1)
            h = _eval_bc(value, mid)
            load = 0.5 * h * length
            np.subtract.at(residual, dm.index(facets[:, 0], f), load)
            np.subtract.at(residual, dm.index(facets[:, 1], f), load)

    # --- Jacobian ---------------------------------------------------------
    # per block: stiffness (scalar * grad_j.grad_i), convection
    # (N_j * vector.grad(N_i)) and mass (scalar * N_i N_j) contributions
    chunk = len(cells) * n_loc * n_loc
    data = np.zeros(len(st["blocks"]) * chunk)
    block_pos = {blk: k for k, blk in enumerate(st["blocks"])}

    def add_block(fi, fj, stiff=None, conv=None, mass=None):
        loc = np.zeros((len(cells), n_loc, n_loc))
        if stiff is not None:
            loc += np.einsum("c,cij->cij", (wq * stiff).sum(axis=1), gg)
        if conv is not None:
            vg = np.einsum("cqd,cid->cqi", conv, grads)
            loc += np.einsum("cq,cqi,qj->cij", wq, vg, N)
        if mass is not None:
            loc += np.einsum("cq,qij->cij", wq * mass, mass_ref)
        k = block_pos[(fi, fj)]
        data[k * chunk: (k + 1) * chunk] = loc.ravel()

    ones = np.ones_like(p)
    add_block(PHI, PHI, stiff=ones)
    if not mixture.incompressible:
        add_block(PHI, PRESSURE, mass=-inv_l2 * n_dp * zy)
    for g in range(n_ion):
        add_block(PHI, 2 + g, mass=-inv_l2 * n_dens * z[g])

    conv_pp = (
        inv_a2 * (n_dp * zy)[:, :, None] * grad_phi[:, None, :]
        if not mixture.incompressible
        else None
    )
    add_block(PRESSURE, PRESSURE, stiff=ones, conv=conv_pp)
    add_block(PRESSURE, PHI, stiff=inv_a2 * nF)
    for g in range(n_ion):
        add_block(PRESSURE, 2 + g, conv=inv_a2 * (n_dens * z[g])[:, :, None] * grad_phi[:, None, :])

    for a in range(n_ion):
        add_block(2 + a, PHI, stiff=z[a] * ones)
        conv_ap = (
            d_pp[:, :, a, None] * grad_p[:, None, :] if not mixture.incompressible else None
        )
        add_block(2 + a, PRESSURE, stiff=d_p[:, :, a], conv=conv_ap)
        for g in range(n_ion):
            stiff = inv_yn.copy()
            conv = inv_yn[:, :, None] ** 2 * sum_grad_y[:, None, :]
            if g == a:
                stiff += inv_y[:, :, a]
                conv = conv - inv_y[:, :, a, None] ** 2 * grad_y[:, None, a, :]
            add_block(2 + a, 2 + g, stiff=stiff, conv=conv)

    csr_data = np.bincount(st["slot"], weights=data, minlength=st["nnz"])
    jac = sp.csr_matrix(
        (csr_data, st["indices"], st["indptr"]), shape=(dm.n_dofs, dm.n_dofs)
    )
    return AssembledSystem(residual, jac, dm, st)


def _bc_plan(st: dict, dofs: np.ndarray):
    """Cached data positions to zero plus diagonal positions for Dirichlet rows."""
    key = dofs.tobytes()
    plan = st["bc_plans"].get(key)
    if plan is not None:
        return plan
    indptr, indices = st["indptr"], st["indices"]
    spans = [np.arange(indptr[d], indptr[d + 1]) for d in dofs]
    zero_pos = np.concatenate(spans) if spans else np.array([], dtype=int)
    diag_pos = np.array(
        [indptr[d] + np.searchsorted(indices[indptr[d]: indptr[d + 1]], d) for d in dofs],
        dtype=int,
    )
    if len(diag_pos) and not (indices[diag_pos] == dofs).all():
        raise ConfigurationError("a Dirichlet row lacks its diagonal entry")
    plan = (zero_pos, diag_pos)
    st["bc_plans"][key] = plan
    return plan


def apply_boundary_conditions(
    sys: AssembledSystem, state: FieldOnMesh, bcs: BoundaryConditionSet
) -> AssembledSystem:
    """Replace Dirichlet rows: residual_i = state_i - g_i, Jacobian row = e_i."""
    mesh = state.mesh
    dm = sys.dofmap
    dofs, values = dirichlet_dofs_values(mesh, bcs, dm.n_fields)
    if not ((dofs % dm.n_fields) == PRESSURE).any():
        raise ConfigurationError(
            "the pressure field needs at least one Dirichlet DOF (boundary value or pin)"
        )
    residual = sys.residual.copy()
    residual[dofs] = state.flat[dofs] - values

    jac = sys.jacobian
    zero_pos, diag_pos = _bc_plan(sys.structure, dofs)
    data = jac.data.copy()
    data[zero_pos] = 0.0
    data[diag_pos] = 1.0
    jac2 = sp.csr_matrix((data, jac.indices, jac.indptr), shape=jac.shape)
    return AssembledSystem(residual, jac2, dm, sys.structure)


def integrate_nodal(mesh: Mesh, nodal: np.ndarray) -> float:
    """Integrate a P1 nodal field over the mesh with the assembly quadrature."""
    ws = _workspace(mesh)
    vals = np.asarray(nodal, dtype=float)[ws["cells"]]
    at_q = np.einsum("ql,cl->cq", ws["N"], vals)
    return float((ws["wq"] * at_q).sum())


def quadrature_values(mesh: Mesh, nodal: np.ndarray):
    """P1 values at quadrature points plus the quadrature weights (c, q)."""
    ws = _workspace(mesh)
    vals = np.asarray(nodal, dtype=float)[ws["cells"]]
    return np.einsum("ql,cl->cq", ws["N"], vals), ws["wq"]
