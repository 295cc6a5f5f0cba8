"""Damped Newton iteration with a feasibility safeguard, plus voltage continuation.

The update is x <- x - gamma_eff * J^-1 F with a fixed damping factor gamma.
If a trial state pushes any nodal fraction (including the derived solvent
fraction) out of (y_floor, 1 - y_floor), or leaves the compressible log
domain, gamma_eff is halved for that iteration, up to 30 times.  Once the
residual drops below a switch threshold the damping can be released
(gamma_eff = 1) to recover quadratic convergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConfigurationError,
    DomainError,
    FeasibilityError,
    FeasibilityExhausted,
    LinearSolveFailure,
    NonConvergence,
    SolverError,
)
from .fem import (
    PHI,
    PRESSURE,
    BoundaryConditionSet,
    apply_boundary_conditions,
    assemble_system,
    dirichlet_dofs_values,
)
from .mesh import FieldOnMesh, Mesh
from .physics import Mixture

MAX_HALVINGS = 30
# after this many failed halvings, switch to the componentwise trust region
CLIP_AFTER_HALVINGS = 4
# iterations without a new best residual before the solve is declared stalled
STAGNATION_LIMIT = 50


@dataclass
class NewtonConfig:
    gamma: float = 0.25
    tol_abs: float = 1e-10
    tol_step: float = 1e-12
    max_iter: int = 200
    y_floor: float = 1e-12     # scenarios with deeply saturated walls need less
    accelerate: bool = True
    switch_threshold: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.tol_abs <= 0 or self.tol_step <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.y_floor <= 0:
            raise ValueError("y_floor must be positive")


@dataclass
class SolveReport:
    converged: bool = False
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    damping_events: int = 0
    continuation_steps: list[tuple[float, int]] = field(default_factory=list)
    # the iteration hit its double-precision floor and returned the best
    # iterate; see the stagnation handling in newton_solve
    stalled: bool = False

    def extend(self, other: "SolveReport", bias: float):
        self.converged = other.converged
        self.iterations += other.iterations
        self.residual_history.extend(other.residual_history)
        self.damping_events += other.damping_events
        self.continuation_steps.append((bias, other.iterations))
        self.stalled = other.stalled


@dataclass
class Problem:
    mesh: Mesh
    mixture: Mixture
    bcs: BoundaryConditionSet


_BANDED_MAX_BANDWIDTH = 24


def _bandwidth(J: sp.csr_matrix) -> int:
    rows = np.repeat(np.arange(J.shape[0]), np.diff(J.indptr))
    return int(np.abs(rows - J.indices).max(initial=0))


def _solve_banded(J: sp.csr_matrix, rhs: np.ndarray, bw: int) -> np.ndarray:
    import scipy.linalg as sla

    n = J.shape[0]
    ab = np.zeros((2 * bw + 1, n))
    rows = np.repeat(np.arange(n), np.diff(J.indptr))
    ab[bw + rows - J.indices, J.indices] = J.data
    try:
        return sla.solve_banded((bw, bw), ab, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise LinearSolveFailure(f"banded factorization failed: {exc}") from exc


def _attempt_solve(J: sp.csr_matrix, rhs: np.ndarray, resolve) -> tuple[np.ndarray, float]:
    """Solve, refine once, and return (x, badness); badness 0 means the
    absolute bound held, otherwise it is the componentwise backward error."""
    x = resolve(rhs)
    if not np.isfinite(x).all():
        return x, math.inf
    bound = 1e-10 * (1.0 + np.abs(rhs).max(initial=0.0))
    res = rhs - J @ x
    if np.abs(res).max(initial=0.0) > bound:
        x2 = x + resolve(res)
        if np.isfinite(x2).all():
            x = x2
            res = rhs - J @ x
    if np.abs(res).max(initial=0.0) <= bound:
        return x, 0.0
    # rows pass on the absolute bound or on componentwise backward stability
    denom = np.abs(J) @ np.abs(x) + np.abs(rhs)
    eta = np.abs(res) / np.maximum(denom, 1e-300)
    eta[np.abs(res) <= bound] = 0.0
    eta_max = float(eta.max(initial=0.0))
    if not math.isfinite(eta_max):
        return x, math.inf
    return x, eta_max


def _solve_best_effort(J, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    """Factorize and solve, banded first where applicable, splu as fallback.

    Returns (x, badness): badness 0 when the absolute residual bound held,
    otherwise the componentwise backward error of the best attempt.
    """
    J = sp.csr_matrix(J)
    rhs = np.asarray(rhs, dtype=float)
    n = J.shape[0]

    def splu_resolver():
        try:
            lu = spla.splu(J.tocsc())
        except RuntimeError as exc:
            raise LinearSolveFailure(f"sparse LU factorization failed: {exc}") from exc
        return lu.solve

    bw = _bandwidth(J) if n > 256 else _BANDED_MAX_BANDWIDTH + 1
    if bw <= _BANDED_MAX_BANDWIDTH:
        x, bad = _attempt_solve(J, rhs, lambda b: _solve_banded(J, b, bw))
        if bad <= 1e-9:
            return x, bad
        x2, bad2 = _attempt_solve(J, rhs, splu_resolver())
        return (x2, bad2) if bad2 < bad else (x, bad)
    return _attempt_solve(J, rhs, splu_resolver())


def linear_solve(J, rhs: np.ndarray) -> np.ndarray:
    """Sparse direct solve with a residual check and one refinement pass.

    Narrow-band matrices (1D meshes with interleaved fields) go through the
    LAPACK banded factorization, everything else through SuperLU.  The
    result must either meet an absolute residual bound or be componentwise
    backward stable.
    """
    x, bad = _solve_best_effort(J, rhs)
    if bad > 1e-9:
        raise LinearSolveFailure(
            f"linear solve is not backward stable (componentwise error {bad:.3e})"
        )
    return x


def _newton_direction(J, rhs: np.ndarray) -> np.ndarray:
    """Best-effort direction for the safeguarded iteration.

    Saturated-wall Jacobians mix row scales across dozens of orders of
    magnitude; the strict residual contract is unattainable there, but an
    inexact direction still drives the damped iteration, whose own residual
    monitoring judges progress.  Truly singular systems still raise.
    """
    x, bad = _solve_best_effort(J, rhs)
    if not np.isfinite(x).all() or not math.isfinite(bad):
        raise LinearSolveFailure("linear solve produced non-finite values")
    return x


# the derived solvent fraction 1 - sum(y) cannot be resolved below one ulp of
# 1, whatever the configured floor; the solved fractions have no such limit
ULP_MARGIN = 2.3e-16


def _feasible(x: np.ndarray, mesh: Mesh, mixture: Mixture, y_floor: float) -> bool:
    """Admissibility of a trial state at the assembly quadrature points.

    Under-resolved meshes have discrete solutions whose nodal fractions
    oscillate slightly outside (0, 1) while every quadrature value stays
    admissible; the logarithms are only ever evaluated at quadrature points,
    so that is where the margins belong.
    """
    from .fem import _workspace   # local import; fem does not import solver

    if not np.isfinite(x).all():
        return False
    n_fields = mixture.n_ions + 2
    v = x.reshape(-1, n_fields)
    y = v[:, 2:]
    y_n = 1.0 - y.sum(axis=1)
    ws = _workspace(mesh)
    cells, N = ws["cells"], ws["N"]
    y_q = np.einsum("ql,cla->cqa", N, y[cells])
    y_n_q = np.einsum("ql,cl->cq", N, y_n[cells])
    derived_floor = max(y_floor, ULP_MARGIN)
    if (y_q <= y_floor).any() or (y_q >= 1.0 - derived_floor).any():
        return False
    if (y_n_q <= derived_floor).any() or (y_n_q >= 1.0 - y_floor).any():
        return False
    if not mixture.incompressible:
        K = mixture.compressibility.K
        p_q = np.einsum("ql,cl->cq", N, v[:, PRESSURE][cells])
        if (1.0 + (p_q - 1.0) / K <= 0.0).any():
            return False
    return True


def _clipped_trial(
    x: np.ndarray, dx: np.ndarray, gamma_eff: float,
    mesh: Mesh, mixture: Mixture, y_floor: float,
) -> np.ndarray | None:
    """Damped step with a multiplicative trust region on the fractions.

    At strongly saturated walls the Newton direction for a trace species is
    dominated by cross-coupling and presses it onto the floor; halving the
    global step then stalls every other unknown.  Instead, each fraction may
    shrink by at most a factor 2 per iteration (and never cross its
    margins), while the remaining unknowns take the full damped step.
    """
    if not np.isfinite(dx).all():
        return None
    n_fields = mixture.n_ions + 2
    v_old = x.reshape(-1, n_fields)
    trial = (x - gamma_eff * dx).reshape(-1, n_fields).copy()
    y_old = v_old[:, 2:]
    y = trial[:, 2:]
    upper_margin = max(y_floor, ULP_MARGIN)
    lower = np.maximum(0.5 * y_old, y_floor * (1.0 + 1e-6))
    np.maximum(y, lower, out=y)
    np.minimum(y, 1.0 - 2.0 * upper_margin, out=y)
    s = y.sum(axis=1)
    crowded = s >= 1.0 - 4.0 * upper_margin
    if crowded.any():
        # rescaling alone cannot reliably pull the sum off 1 at ulp scale;
        # let the largest fraction absorb the remainder explicitly, then
        # restore any floor-pinned entries the rescale dragged down
        rows = np.nonzero(crowded)[0]
        y[rows] *= ((1.0 - 8.0 * upper_margin) / s[rows])[:, None]
        excess = y[rows].sum(axis=1) - (1.0 - 8.0 * upper_margin)
        y[rows, y[rows].argmax(axis=1)] -= excess
        np.maximum(y, lower, out=y)
    if not mixture.incompressible:
        K = mixture.compressibility.K
        p_min = 1.0 - K * (1.0 - 1e-12)
        np.maximum(trial[:, PRESSURE], p_min, out=trial[:, PRESSURE])
    # keep the unconstrained fields from running away on a garbage direction
    for f in (PHI, PRESSURE):
        step = trial[:, f] - v_old[:, f]
        cap = 10.0 * (1.0 + np.abs(v_old[:, f]).max())
        worst = np.abs(step).max()
        if worst > cap:
            trial[:, f] = v_old[:, f] + step * (cap / worst)
    out = trial.reshape(-1)
    return out if _feasible(out, mesh, mixture, y_floor) else None


def _linear_phi_fit(problem: Problem) -> np.ndarray:
    """Least-squares linear (affine) fit of phi through its Dirichlet data."""
    mesh, bcs = problem.mesh, problem.bcs
    n_fields = problem.mixture.n_ions + 2
    dofs, vals = dirichlet_dofs_values(mesh, bcs, n_fields)
    fields = dofs % n_fields
    phi_sel = fields == PHI
    if not phi_sel.any():
        return np.zeros(mesh.n_nodes)
    pts = mesh.nodes[(dofs // n_fields)[phi_sel]]
    A = np.column_stack([np.ones(len(pts)), pts])
    coef, *_ = np.linalg.lstsq(A, vals[phi_sel], rcond=None)
    return np.column_stack([np.ones(mesh.n_nodes), mesh.nodes]) @ coef


def default_initial_guess(problem: Problem) -> FieldOnMesh:
    """Admissible start: phi fitted linearly through its Dirichlet data,
    p at the pinned value, fractions at their bulk Dirichlet values."""
    mesh, mixture, bcs = problem.mesh, problem.mixture, problem.bcs
    n_fields = mixture.n_ions + 2
    values = np.zeros((mesh.n_nodes, n_fields))
    dofs, vals = dirichlet_dofs_values(mesh, bcs, n_fields)
    fields = dofs % n_fields

    values[:, PHI] = _linear_phi_fit(problem)

    p_sel = fields == PRESSURE
    values[:, PRESSURE] = vals[p_sel].mean() if p_sel.any() else 1.0

    for a in range(mixture.n_ions):
        sel = fields == 2 + a
        values[:, 2 + a] = vals[sel].mean() if sel.any() else 1.0 / mixture.n_species
    return FieldOnMesh(mesh, values)


def _residual_norm(state: FieldOnMesh, problem: Problem) -> float:
    sys = assemble_system(state, problem.mesh, problem.mixture, problem.bcs)
    sys = apply_boundary_conditions(sys, state, problem.bcs)
    return float(np.abs(sys.residual).max())


def solve_scalar_potential(
    mesh: Mesh,
    lambda2: float,
    charge_density,
    dirichlet: dict[str, float],
    phi_bulk: float = 0.0,
    cfg: NewtonConfig | None = None,
    delta_max: float = 1.0,
) -> tuple[np.ndarray, SolveReport]:
    """Damped Newton for a single-field potential equation.

    Solves grad(phi).grad(v) - (1/lambda2) rho(phi) v = 0 with the given
    Dirichlet data, ramping it from phi_bulk in steps of at most delta_max.
    `charge_density(phi)` returns (rho, drho/dphi) arrays; trial states with
    non-finite density are rejected by step halving.
    """
    from .fem import _workspace   # local import; fem does not import solver

    cfg = cfg or NewtonConfig()
    ws = _workspace(mesh)
    N, wq, gg, mass_ref, cells, grads = (
        ws["N"], ws["wq"], ws["gg"], ws["mass_ref"], ws["cells"], ws["grads"],
    )
    n_loc = cells.shape[1]
    n_nodes = mesh.n_nodes

    node_groups, val_groups = [], []
    for tag, value in dirichlet.items():
        nodes = mesh.nodes_for(tag)
        node_groups.append(nodes)
        val_groups.append(np.full(len(nodes), float(value)))
    if not node_groups:
        raise ConfigurationError("the potential needs Dirichlet data somewhere")
    dir_nodes = np.concatenate(node_groups)
    dir_targets = np.concatenate(val_groups)
    uniq_nodes = np.unique(dir_nodes)

    inv_l2 = 1.0 / lambda2
    stiff_rows = np.repeat(cells, n_loc, axis=1).ravel()
    stiff_cols = np.tile(cells, (1, n_loc)).ravel()
    measure = wq.sum(axis=1)

    def assemble(phi: np.ndarray, dir_vals: np.ndarray):
        phi_q = np.einsum("ql,cl->cq", N, phi[cells])
        grad_phi = np.einsum("cld,cl->cd", grads, phi[cells])
        rho, drho = charge_density(phi_q)
        if not (np.isfinite(rho).all() and np.isfinite(drho).all()):
            return None, None
        r_loc = np.einsum("cd,cid->ci", grad_phi, grads) * measure[:, None]
        r_loc += np.einsum("cq,qi->ci", wq * (-inv_l2 * rho), N)
        residual = np.bincount(cells.ravel(), weights=r_loc.ravel(), minlength=n_nodes)
        loc = np.einsum("c,cij->cij", measure, gg)
        loc += np.einsum("cq,qij->cij", wq * (-inv_l2 * drho), mass_ref)
        jac = sp.coo_matrix((loc.ravel(), (stiff_rows, stiff_cols)), shape=(n_nodes, n_nodes))
        residual[dir_nodes] = phi[dir_nodes] - dir_vals
        keep = ~np.isin(jac.row, uniq_nodes)
        rows = np.concatenate([jac.row[keep], uniq_nodes])
        cols = np.concatenate([jac.col[keep], uniq_nodes])
        data = np.concatenate([jac.data[keep], np.ones(len(uniq_nodes))])
        return residual, sp.coo_matrix((data, (rows, cols)), shape=jac.shape).tocsr()

    span = dir_targets - phi_bulk
    max_jump = float(np.abs(span).max(initial=0.0))
    n_steps = max(1, math.ceil(max_jump / delta_max - 1e-12))
    phi = np.full(n_nodes, float(phi_bulk))
    report = SolveReport()
    for k in range(n_steps):
        dir_vals = phi_bulk + span * (k + 1) / n_steps
        phi[dir_nodes] = dir_vals
        step = SolveReport()
        prev_step = math.inf
        while True:
            residual, jac = assemble(phi, dir_vals)
            if residual is None:
                raise NonConvergence("charge density overflowed at an accepted state",
                                     report=report)
            r = float(np.abs(residual).max())
            step.residual_history.append(r)
            if r <= cfg.tol_abs or prev_step <= cfg.tol_step:
                step.converged = True
                break
            if step.iterations >= cfg.max_iter:
                raise NonConvergence(
                    f"potential solve stalled at ramp step {k + 1}/{n_steps} "
                    f"(residual {r:.3e})",
                    report=report,
                )
            dphi = linear_solve(jac, residual)
            gamma_eff = 1.0 if (cfg.accelerate and r < cfg.switch_threshold) else cfg.gamma
            halvings = 0
            trial = phi - gamma_eff * dphi
            while not np.isfinite(charge_density(trial[None, :])[0]).all():
                halvings += 1
                if halvings > MAX_HALVINGS:
                    raise FeasibilityExhausted("potential trial overflowed repeatedly",
                                               report=report)
                gamma_eff *= 0.5
                step.damping_events += 1
                trial = phi - gamma_eff * dphi
            prev_step = gamma_eff * float(np.abs(dphi).max())
            phi = trial
            step.iterations += 1
        report.extend(step, float(np.abs(dir_vals - phi_bulk).max(initial=0.0)))
    return phi, report


def _phi_dirichlet_dict(problem: Problem) -> dict[str, float] | None:
    """Constant Dirichlet data of the potential, keyed by tag."""
    out = {}
    for (tag, f), value in problem.bcs.dirichlet.items():
        if f == PHI:
            if callable(value):
                return None
            out[tag] = float(value)
    return out or None


def _saturating_charge_closure(problem: Problem):
    """rho(phi) of the reduced single-field equation: ion fractions follow
    the saturating zero-flux balance of an ideal incompressible mixture."""
    ref = _bulk_reference(problem)
    if ref is None:
        return None, None
    phi_r, _, y_r = ref
    mixture = problem.mixture
    y_n_r = 1.0 - y_r.sum()
    if y_n_r <= 0:
        return None, None
    z = mixture.charges
    log_r0 = np.log(y_r / y_n_r)

    def rho(phi_q: np.ndarray):
        log_r = log_r0[:, None, None] - z[:, None, None] * (phi_q[None] - phi_r)
        m = np.maximum(log_r.max(axis=0), 0.0)
        s = np.exp(log_r - m[None])
        denom = np.exp(-m) + s.sum(axis=0)
        y = s / denom[None]                      # y_alpha * exp(m) cancels in the ratio
        nf = (z[:, None, None] * y).sum(axis=0)
        dnf = -(z[:, None, None] ** 2 * y).sum(axis=0) + nf * (z[:, None, None] * y).sum(axis=0)
        return nf, dnf

    return rho, phi_r


def reduced_equilibrium_candidate(
    problem: Problem, bias_dirichlet: dict[str, float], cfg: NewtonConfig
) -> FieldOnMesh | None:
    """Initial-guess generator: solve the reduced potential equation with the
    saturating closure, then rebuild all fields by equilibrium projection."""
    rho, phi_r = _saturating_charge_closure(problem)
    if rho is None:
        return None
    try:
        phi, _ = solve_scalar_potential(
            problem.mesh, problem.mixture.lambda2, rho, bias_dirichlet,
            phi_bulk=phi_r, cfg=cfg,
        )
    except (SolverError, ConfigurationError):
        return None
    n_fields = problem.mixture.n_ions + 2
    vals = np.zeros((problem.mesh.n_nodes, n_fields))
    vals[:, PHI] = phi
    state = FieldOnMesh(problem.mesh, vals)
    return equilibrium_full_projection(state, problem)


def _bulk_reference(problem: Problem):
    """(phi, p, y) of the single boundary tag carrying full Dirichlet data
    for all fractions plus the potential; None if no unique such tag."""
    n_ion = problem.mixture.n_ions
    per_tag: dict[str, dict[int, object]] = {}
    for (tag, f), value in problem.bcs.dirichlet.items():
        per_tag.setdefault(tag, {})[f] = value
    candidates = [
        tag for tag, d in per_tag.items()
        if PHI in d and all(2 + k in d for k in range(n_ion))
    ]
    if len(candidates) != 1:
        return None
    d = per_tag[candidates[0]]
    if any(callable(v) for v in d.values()):
        return None
    phi_r = float(d[PHI])
    if PRESSURE in d:
        p_r = float(d[PRESSURE])
    else:
        pin_values = [float(v) for f, _, v in problem.bcs.pins if f == PRESSURE]
        p_r = pin_values[0] if pin_values else 1.0
    y_r = np.array([float(d[2 + k]) for k in range(n_ion)])
    return phi_r, p_r, y_r


def equilibrium_trace_polish(
    state: FieldOnMesh, problem: Problem, threshold: float = 1e-4,
    y_floor: float = 1e-12,
) -> tuple[FieldOnMesh, bool]:
    """Reassign trace fractions from the pointwise zero-flux balance.

    Where a solved fraction is many orders below the dominant ones, its
    Newton direction is swamped by the conditioning of the coupled system;
    its converged value follows instead from the constant flux potential,
    y_a = y_a^R (y_s/y_s^R) exp(-z_a dphi - kappa_a dg), evaluated with the
    current potential, pressure and solvent fields.  Only components below
    the threshold are replaced.
    """
    ref = _bulk_reference(problem)
    if ref is None:
        return state, False
    phi_r, p_r, y_r = ref
    mixture = problem.mixture
    phi = state.values[:, PHI]
    p = state.values[:, PRESSURE]
    y = state.values[:, 2:]
    y_n = 1.0 - y.sum(axis=1)
    y_n_r = 1.0 - y_r.sum()
    if y_n_r <= 0 or (y_n <= 0).any():
        return state, False
    if mixture.incompressible:
        dg = mixture.a2 * (p - p_r)
    else:
        K = mixture.compressibility.K
        dg = mixture.a2 * K * (np.log1p((p - 1.0) / K) - np.log1p((p_r - 1.0) / K))
    z = mixture.charges
    kap = mixture.kappas
    with np.errstate(over="ignore"):
        target = (
            y_r[None, :]
            * (y_n / y_n_r)[:, None]
            * np.exp(-z[None, :] * (phi - phi_r)[:, None] - kap[None, :] * dg[:, None])
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(target / y, y / target)
    target_ok = np.isfinite(target) & (target > y_floor * (1.0 + 1e-6)) & (target < 1e-2)
    sel = target_ok & (((y < threshold) & (ratio > 10.0)) | (y <= y_floor))
    if not sel.any():
        return state, False
    vals = state.values.copy()
    vals[:, 2:][sel] = target[sel]
    # a repaired trace must not crowd out the solvent at saturated nodes
    yn_new = 1.0 - vals[:, 2:].sum(axis=1)
    broken = yn_new <= max(y_floor, ULP_MARGIN)
    if broken.any():
        vals[broken, 2:] = state.values[broken, 2:]
        if not (sel & ~broken[:, None]).any():
            return state, False
    return FieldOnMesh(state.mesh, vals), True


def equilibrium_full_projection(state: FieldOnMesh, problem: Problem) -> FieldOnMesh | None:
    """Rebuild all fractions and the pressure from the potential alone via
    the pointwise zero-flux balance anchored at the bulk boundary.

    Exact for ideal incompressible mixtures in equilibrium; a good initial
    guess otherwise.  Returns None when no unique bulk reference exists.
    """
    ref = _bulk_reference(problem)
    if ref is None:
        return None
    phi_r, p_r, y_r = ref
    mixture = problem.mixture
    y_n_r = 1.0 - y_r.sum()
    if y_n_r <= 0:
        return None
    phi = state.values[:, PHI]
    p = state.values[:, PRESSURE].copy()
    z = mixture.charges
    kap = mixture.kappas
    for _ in range(3):
        if mixture.incompressible:
            dg = mixture.a2 * (p - p_r)
        else:
            K = mixture.compressibility.K
            dg = mixture.a2 * K * (np.log1p((p - 1.0) / K) - np.log1p((p_r - 1.0) / K))
        with np.errstate(over="ignore"):
            log_r = (
                np.log(y_r / y_n_r)[None, :]
                - z[None, :] * (phi - phi_r)[:, None]
                - kap[None, :] * dg[:, None]
            )
        # stable y_N = 1/(1 + sum r): factor out the largest ratio
        m = log_r.max(axis=1, keepdims=True)
        sum_scaled = np.exp(log_r - m).sum(axis=1)
        log_denominator = m[:, 0] + np.log(np.exp(-m[:, 0]) + sum_scaled)
        y_new = np.exp(log_r - log_denominator[:, None])
        y_n_new = np.exp(-log_denominator)
        p = p_r + np.log(y_n_r / y_n_new) / mixture.a2
        if mixture.incompressible and (kap == 0).all():
            break
    if not (np.isfinite(y_new).all() and np.isfinite(p).all()):
        return None
    # keep the derived solvent fraction representable: trim the sum away
    # from 1 with the largest fraction absorbing the excess
    s = y_new.sum(axis=1)
    crowded = s >= 1.0 - 4.0 * ULP_MARGIN
    if crowded.any():
        rows = np.nonzero(crowded)[0]
        y_new[rows] *= ((1.0 - 8.0 * ULP_MARGIN) / s[rows])[:, None]
        excess = y_new[rows].sum(axis=1) - (1.0 - 8.0 * ULP_MARGIN)
        y_new[rows, y_new[rows].argmax(axis=1)] -= excess
    vals = state.values.copy()
    vals[:, 2:] = y_new
    vals[:, PRESSURE] = p
    return FieldOnMesh(state.mesh, vals)


def least_squares_rescue(
    state: FieldOnMesh, problem: Problem, cfg: NewtonConfig | None = None,
    max_dofs: int = 1500,
) -> tuple[FieldOnMesh, float] | None:
    """Levenberg-Marquardt finish for small stalled systems.

    Meshes that under-resolve the double layer put the discrete solution on
    a knife edge (some nodal fractions sit slightly outside (0, 1)) that the
    damped Newton iteration cannot reach; for the small systems of a
    convergence study the dense trust-region solver finds it.  Tries the
    stalled state and the reduced-equation candidate as starting points and
    returns the better (state, residual_norm), or None when the system is
    too large.
    """
    import scipy.optimize

    cfg = cfg or NewtonConfig()
    mesh, mixture, bcs = problem.mesh, problem.mixture, problem.bcs
    n_fields = mixture.n_ions + 2
    n_dofs = mesh.n_nodes * n_fields
    if n_dofs > max_dofs:
        return None

    def _system(x, check):
        st = FieldOnMesh(mesh, x.reshape(-1, n_fields))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            sys = assemble_system(st, mesh, mixture, bcs, check_admissible=check)
            return apply_boundary_conditions(sys, st, bcs)

    def make_callbacks(check):
        last_jac = [np.eye(n_dofs)]

        def fun(x):
            try:
                res = _system(x, check).residual
            except (DomainError, FeasibilityError):
                return np.full(n_dofs, 1e8)
            return np.where(np.isfinite(res), res, 1e8)

        def jac(x):
            try:
                j = _system(x, check).jacobian.toarray()
            except (DomainError, FeasibilityError):
                return last_jac[0]
            if np.isfinite(j).all():
                last_jac[0] = j
            return last_jac[0]

        return fun, jac

    dofs, vals = dirichlet_dofs_values(mesh, bcs, n_fields)
    starts = []
    phi_bcs = _phi_dirichlet_dict(problem)
    if phi_bcs is not None:
        candidate = reduced_equilibrium_candidate(problem, phi_bcs, cfg)
        if candidate is not None:
            starts.append(candidate)
    starts.append(state)
    def run_lm(x0, check, maxiter):
        fun, jac = make_callbacks(check)
        sol = scipy.optimize.root(
            fun, x0, jac=jac, method="lm",
            options={"maxiter": maxiter, "xtol": 1e-15, "ftol": 1e-15},
        )
        return sol.x, float(np.abs(fun(sol.x)).max())

    best_x, best_res, best_cfg = None, math.inf, (True,)
    # the trajectory is sensitive to whether infeasible probes are walled
    # off or evaluated; scout every combination cheaply, then extend the best
    for start, check in [(s_, c_) for c_ in (True, False) for s_ in starts]:
        x0 = start.values.reshape(-1).copy()
        x0[dofs] = vals
        x, res = run_lm(x0, check, 150)
        if res < best_res:
            best_x, best_res, best_cfg = x, res, (check,)
        if best_res <= 1e-6:
            break
    if best_x is not None and best_res > 1e-6:
        x, res = run_lm(best_x, best_cfg[0], 500)
        if res < best_res:
            best_x, best_res = x, res
    if best_x is None:
        return None
    return FieldOnMesh(mesh, best_x.reshape(-1, n_fields)), best_res


def boltzmann_warm_start(
    state: FieldOnMesh,
    prev_problem: Problem,
    new_problem: Problem,
    prev_bias: float,
    new_bias: float,
) -> FieldOnMesh:
    """Transform a converged state into a warm start for a new bias.

    The potential deviation from its linear fit is rescaled by the bias
    ratio; the fractions are rescaled by the matching Boltzmann factors and
    renormalized; the pressure picks up (1/a^2) ln of the renormalizer,
    which is the exact momentum-balance response for an ideal incompressible
    mixture.  This multiplicative update tracks the saturated-wall structure
    that an additive Newton step cannot represent, which is what makes
    continuation robust at strong bias.
    """
    mixture = new_problem.mixture
    phi_old = state.values[:, PHI]
    g_prev = _linear_phi_fit(prev_problem)
    g_new = _linear_phi_fit(new_problem)
    scale = new_bias / prev_bias if abs(prev_bias) > 1e-300 else 1.0
    phi_warm = g_new + (phi_old - g_prev) * scale
    dphi = phi_warm - phi_old
    y = state.values[:, 2:]
    y_n = 1.0 - y.sum(axis=1)
    factors = np.exp(-mixture.charges[None, :] * dphi[:, None])
    num = y * factors
    denom = y_n + num.sum(axis=1)
    vals = state.values.copy()
    vals[:, PHI] = phi_warm
    vals[:, 2:] = num / denom[:, None]
    vals[:, PRESSURE] = state.values[:, PRESSURE] + np.log(denom) / mixture.a2
    return FieldOnMesh(state.mesh, vals)


def newton_solve(
    initial: FieldOnMesh, problem: Problem, cfg: NewtonConfig | None = None
) -> tuple[FieldOnMesh, SolveReport]:
    """Solve the nonlinear system from the given start state.

    Dirichlet values are written into the state before the first assembly,
    so a warm start only needs admissible interior values.
    """
    cfg = cfg or NewtonConfig()
    mesh, mixture, bcs = problem.mesh, problem.mixture, problem.bcs
    n_fields = mixture.n_ions + 2
    x = initial.values.reshape(-1).copy()
    dofs, vals = dirichlet_dofs_values(mesh, bcs, n_fields)
    x[dofs] = vals
    if not _feasible(x, mesh, mixture, cfg.y_floor):
        raise FeasibilityError("initial state is not admissible")

    report = SolveReport()
    prev_step = math.inf
    prev_r = math.inf
    accel_ok = cfg.accelerate
    last_accelerated = False
    gamma_mult = 1.0
    reverts = 0
    x_best = x.copy()
    r_best = math.inf
    stagnant = 0
    while True:
        state = FieldOnMesh(mesh, x.reshape(-1, n_fields))
        sys = assemble_system(state, mesh, mixture, bcs)
        sys = apply_boundary_conditions(sys, state, bcs)
        r = float(np.abs(sys.residual).max())
        if r > 1e3 * prev_r and reverts < 12:
            # the step exploded the residual (garbage direction on an
            # ill-conditioned system): return to the best iterate, with the
            # damping tightened for the rest of this solve
            if last_accelerated:
                accel_ok = False
            else:
                gamma_mult = max(gamma_mult * 0.5, 1.0 / 64.0)
            reverts += 1
            last_accelerated = False
            report.damping_events += 1
            x = x_best.copy()
            state = FieldOnMesh(mesh, x.reshape(-1, n_fields))
            sys = assemble_system(state, mesh, mixture, bcs)
            sys = apply_boundary_conditions(sys, state, bcs)
            r = float(np.abs(sys.residual).max())
        report.residual_history.append(r)
        if r < 0.999 * r_best:
            r_best = r
            x_best = x.copy()
            stagnant = 0
        else:
            stagnant += 1
        if r <= cfg.tol_abs or prev_step <= cfg.tol_step:
            report.converged = True
            return FieldOnMesh(mesh, x.reshape(-1, n_fields)), report
        if stagnant >= STAGNATION_LIMIT:
            # no progress for many iterations: the residual has reached its
            # double-precision floor (deeply saturated walls); hand back the
            # best iterate rather than thrash
            report.stalled = True
            report.residual_history.append(r_best)
            return FieldOnMesh(mesh, x_best.reshape(-1, n_fields)), report
        if report.iterations >= cfg.max_iter:
            break
        dx = _newton_direction(sys.jacobian_csr(), sys.residual)
        gamma_base = 1.0 if (accel_ok and r < cfg.switch_threshold) else cfg.gamma * gamma_mult
        last_accelerated = gamma_base == 1.0
        gamma_eff = gamma_base
        halvings = 0
        trial = x - gamma_eff * dx
        while not _feasible(trial, mesh, mixture, cfg.y_floor):
            if halvings >= CLIP_AFTER_HALVINGS:
                clipped = _clipped_trial(x, dx, gamma_base, mesh, mixture, cfg.y_floor)
                if clipped is not None:
                    trial = clipped
                    report.damping_events += 1
                    break
            halvings += 1
            if halvings > MAX_HALVINGS:
                if stagnant > 0 or r_best < math.inf:
                    # forfeit this update; the stagnation handling will hand
                    # back the best iterate if no direction ever works
                    trial = None
                    report.damping_events += 1
                    break
                raise FeasibilityExhausted(
                    f"no admissible step after {MAX_HALVINGS} halvings "
                    f"(iteration {report.iterations}, residual {r:.3e})",
                    report=report,
                )
            gamma_eff *= 0.5
            report.damping_events += 1
            trial = x - gamma_eff * dx
        if trial is None:
            # a forfeited update must not masquerade as step convergence
            prev_step = math.inf
            prev_r = r
            stagnant += 1
        else:
            prev_step = float(np.abs(trial - x).max())
            prev_r = r
            x = trial
        report.iterations += 1
    raise NonConvergence(
        f"Newton did not converge in {cfg.max_iter} iterations "
        f"(last residual {report.residual_history[-1]:.3e})",
        report=report,
    )


def continuation_solve(
    target_bias: float,
    make_problem: Callable[[float], Problem],
    cfg: NewtonConfig | None = None,
    delta_max: float = 1.0,
    initial: FieldOnMesh | None = None,
    start_bias: float = 0.0,
) -> tuple[FieldOnMesh, SolveReport]:
    """Ramp the potential bias in equal steps of at most delta_max,
    warm-starting each Newton solve from the previous converged state."""
    if delta_max <= 0:
        raise ValueError("delta_max must be positive")
    cfg = cfg or NewtonConfig()
    span = target_bias - start_bias
    n_steps = max(1, math.ceil(abs(span) / delta_max - 1e-12))
    biases = [start_bias + span * (k + 1) / n_steps for k in range(n_steps)]

    report = SolveReport()
    if initial is not None:
        state = initial
        prev_problem = make_problem(start_bias)
    else:
        state = default_initial_guess(make_problem(biases[0]))
        prev_problem = None
    prev_bias = start_bias
    for k, bias in enumerate(biases):
        problem = make_problem(bias)
        guess = state
        if prev_problem is not None:
            guess = boltzmann_warm_start(state, prev_problem, problem, prev_bias, bias)
            guess, _ = equilibrium_trace_polish(guess, problem, y_floor=cfg.y_floor)
        try:
            try:
                state, step_report = newton_solve(guess, problem, cfg)
            except FeasibilityError:
                # rescaled guess left the feasible margins; retry plainly
                state, step_report = newton_solve(state, problem, cfg)
            if step_report.residual_history[-1] > 50.0 * cfg.tol_abs:
                # a stall leaves noise-dominated fractions behind; rebuild
                # them algebraically from the potential, re-solve, and keep
                # whichever state carries the smallest residual
                mixture = problem.mixture
                n_fields = mixture.n_ions + 2
                best_state = state
                best_res = step_report.residual_history[-1]
                for rebuild in ("polish", "projection", "reduced"):
                    if rebuild == "polish":
                        candidate, changed = equilibrium_trace_polish(
                            state, problem, y_floor=cfg.y_floor
                        )
                        if not changed:
                            continue
                    elif rebuild == "projection":
                        candidate = equilibrium_full_projection(state, problem)
                        if candidate is None:
                            continue
                    else:
                        phi_bcs = _phi_dirichlet_dict(problem)
                        if phi_bcs is None:
                            continue
                        candidate = reduced_equilibrium_candidate(problem, phi_bcs, cfg)
                        if candidate is None:
                            continue
                    if not _feasible(candidate.values.reshape(-1), problem.mesh, mixture, cfg.y_floor):
                        continue
                    try:
                        cand_res = _residual_norm(candidate, problem)
                    except FeasibilityError:
                        cand_res = math.inf
                    if cand_res < best_res:
                        best_state, best_res = candidate, cand_res
                    try:
                        state2, rep2 = newton_solve(candidate, problem, cfg)
                    except (SolverError, FeasibilityError):
                        continue
                    step_report.iterations += rep2.iterations
                    step_report.damping_events += rep2.damping_events
                    if rep2.residual_history[-1] < best_res:
                        best_state, best_res = state2, rep2.residual_history[-1]
                        step_report.converged = rep2.converged
                        step_report.stalled = rep2.stalled
                    if best_res <= 50.0 * cfg.tol_abs:
                        break
                state = best_state
                step_report.residual_history.append(best_res)
                if best_res > 50.0 * cfg.tol_abs:
                    # leave algebraically clean trace fractions in the output
                    state, _ = equilibrium_trace_polish(state, problem, y_floor=cfg.y_floor)
        except (NonConvergence, FeasibilityExhausted, LinearSolveFailure) as exc:
            exc.args = (f"continuation step {k + 1}/{n_steps} (bias {bias:g}): {exc.args[0]}",)
            if getattr(exc, "report", None) is not None:
                report.extend(exc.report, bias)
                exc.report = report
            raise
        report.extend(step_report, bias)
        prev_problem, prev_bias = problem, bias
    return state, report
