"""Derived quantities and experiment harnesses.

Total stored charge, differential double-layer capacitance sweeps, the two
error norms used for mesh convergence, and the convergence-study driver.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import physics
from .errors import ConfigurationError
from .fem import PRESSURE, quadrature_values
from .mesh import FieldOnMesh, interpolate_p1
from .physics import Mixture
from .solver import NewtonConfig, Problem, SolveReport, default_initial_guess, newton_solve


@dataclass
class CapacitanceCurve:
    """Rows of (applied potential, stored charge, differential capacitance)."""

    phi_l: np.ndarray
    charge: np.ndarray
    c_dl: np.ndarray

    def rows(self):
        return list(zip(self.phi_l, self.charge, self.c_dl))

    def to_csv(self, path: str | Path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phi_L", "Q", "C_dl"])
            for row in self.rows():
                w.writerow([repr(float(v)) for v in row])
        return path


@dataclass
class ConvergenceTable:
    """Error norms per mesh and field, plus fitted log-log slopes."""

    rows: list[tuple[int, float, str, float, float]]   # (n_cells, h, field, e2, einf)
    slopes: dict[tuple[str, str], float]               # (field, norm) -> slope

    def to_csv(self, path: str | Path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_cells", "h", "field", "e2", "einf"])
            for n_cells, h, fname, e2, einf in self.rows:
                w.writerow([n_cells, repr(float(h)), fname, repr(float(e2)), repr(float(einf))])
            fields = sorted({f for (f, _) in self.slopes})
            for fname in fields:
                fh.write(
                    f"# slope,{fname},{self.slopes[(fname, 'e2')]!r},{self.slopes[(fname, 'einf')]!r}\n"
                )
        return path


def total_charge(state: FieldOnMesh, mixture: Mixture) -> float:
    """Integral of the free charge density with the assembly quadrature rule."""
    p_q, wq = quadrature_values(state.mesh, state.values[:, PRESSURE])
    zy_q, _ = quadrature_values(state.mesh, state.values[:, 2:] @ mixture.charges)
    n_q = physics.number_density(p_q, mixture)
    return float((wq * n_q * zy_q).sum())


def error_norms(f_coarse: FieldOnMesh, f_fine: FieldOnMesh) -> tuple[float, float]:
    """(e2, einf) of f_fine minus the P1 interpolant of f_coarse.

    e2 integrates the squared piecewise-linear difference exactly on the
    fine mesh.  einf is the max over the coarse solution's own nodes (the
    reference evaluated there by P1 interpolation, exact for nested
    meshes); between coarse nodes the difference is dominated by the P1
    interpolation error of an under-resolved layer, which would mask the
    nodal convergence order.
    """
    if f_coarse.n_components != f_fine.n_components:
        raise ConfigurationError("fields have different component counts")
    diff = f_fine.values - interpolate_p1(f_coarse, f_fine.mesh).values
    at_coarse = interpolate_p1(f_fine, f_coarse.mesh).values - f_coarse.values
    einf = float(np.abs(at_coarse).max())
    mesh = f_fine.mesh
    d = diff[mesh.cells]                      # (c, loc, comp)
    measures = mesh.cell_measures()
    if mesh.dim == 1:
        a, b = d[:, 0], d[:, 1]
        cell_int = (a * a + a * b + b * b) / 3.0
    else:
        a, b, c = d[:, 0], d[:, 1], d[:, 2]
        cell_int = (a * a + b * b + c * c + a * b + b * c + a * c) / 6.0
    e2 = float(np.sqrt((measures[:, None] * cell_int).sum()))
    return e2, einf


def convergence_study(
    solve_on: Callable[[int], FieldOnMesh],
    cell_counts: Sequence[int],
    reference_cells: int,
    field_names: Sequence[str],
) -> ConvergenceTable:
    """Solve on each mesh, compare against the reference solve per field,
    and fit log-log slopes of both norms by least squares."""
    cell_counts = sorted(cell_counts)
    if reference_cells < 8 * cell_counts[-1]:
        raise ConfigurationError(
            f"reference mesh ({reference_cells}) must be at least 8x the largest "
            f"study mesh ({cell_counts[-1]})"
        )
    # coarse-to-fine order so the caller can warm-start each solve from the last
    solutions = [solve_on(n_cells) for n_cells in cell_counts]
    reference = solve_on(reference_cells)
    domain = reference.mesh.nodes[-1, 0] - reference.mesh.nodes[0, 0] if reference.mesh.dim == 1 else None
    rows = []
    for n_cells, coarse in zip(cell_counts, solutions):
        h = (domain / n_cells) if domain is not None else math.nan
        for k, fname in enumerate(field_names):
            e2, einf = error_norms(coarse.component(k), reference.component(k))
            rows.append((n_cells, h, fname, e2, einf))
    slopes = {}
    log_n = np.log([r[0] for r in rows[:: len(field_names)]])
    for k, fname in enumerate(field_names):
        e2s = np.log([rows[i * len(field_names) + k][3] for i in range(len(cell_counts))])
        einfs = np.log([rows[i * len(field_names) + k][4] for i in range(len(cell_counts))])
        slopes[(fname, "e2")] = float(-np.polyfit(log_n, e2s, 1)[0])
        slopes[(fname, "einf")] = float(-np.polyfit(log_n, einfs, 1)[0])
    return ConvergenceTable(rows, slopes)


def _differentiate_uniform(q: np.ndarray, delta: float) -> np.ndarray:
    """Second-order dQ/dphi on a uniform grid (central inside, one-sided ends)."""
    c = np.empty_like(q)
    c[1:-1] = (q[2:] - q[:-2]) / (2.0 * delta)
    c[0] = (-3.0 * q[0] + 4.0 * q[1] - q[2]) / (2.0 * delta)
    c[-1] = (3.0 * q[-1] - 4.0 * q[-2] + q[-3]) / (2.0 * delta)
    return c


def _capacitance_from_charge(q: np.ndarray, delta: float) -> np.ndarray:
    """Differential double-layer capacitance from the integrated free charge.

    The integral of n^F over the electrolyte is the screening charge, equal
    and opposite to the charge stored on the electrode; the reported
    capacitance uses the electrode-side sign so it is positive.
    """
    return -_differentiate_uniform(q, delta)


def capacitance_sweep(
    phi_grid: Sequence[float],
    make_problem: Callable[[float], Problem],
    cfg: NewtonConfig | None = None,
    initial: FieldOnMesh | None = None,
    charge_of: Callable[[FieldOnMesh, Mixture], float] = total_charge,
) -> tuple[CapacitanceCurve, SolveReport]:
    """Solve on a uniform bias grid, warm-starting outward from the value
    nearest zero in both directions, and differentiate Q by finite
    differences."""
    cfg = cfg or NewtonConfig()
    grid = np.asarray(phi_grid, dtype=float)
    if len(grid) < 3:
        raise ConfigurationError("capacitance grid needs at least 3 points")
    deltas = np.diff(grid)
    delta = deltas[0]
    if delta <= 0 or not np.allclose(deltas, delta, rtol=1e-9, atol=1e-12):
        raise ConfigurationError("capacitance grid must be uniform and increasing")

    start = int(np.argmin(np.abs(grid)))
    q = np.empty(len(grid))
    report = SolveReport()

    problem0 = make_problem(grid[start])
    state0 = initial if initial is not None else default_initial_guess(problem0)
    state0, rep = newton_solve(state0, problem0, cfg)
    report.extend(rep, grid[start])
    q[start] = charge_of(state0, problem0.mixture)

    for indices in (range(start + 1, len(grid)), range(start - 1, -1, -1)):
        state = state0
        for i in indices:
            problem = make_problem(grid[i])
            try:
                state, rep = newton_solve(state, problem, cfg)
            except Exception as exc:
                exc.args = (f"capacitance sweep failed at phi_L = {grid[i]:g}: {exc.args[0]}",)
                raise
            report.extend(rep, grid[i])
            q[i] = charge_of(state, problem.mixture)

    c_dl = _capacitance_from_charge(q, delta)
    return CapacitanceCurve(grid, q, c_dl), report


def local_maxima(values: np.ndarray) -> list[int]:
    """Indices of strict interior local maxima of a sampled curve."""
    v = np.asarray(values)
    return [i for i in range(1, len(v) - 1) if v[i] > v[i - 1] and v[i] > v[i + 1]]


def pressure_tv_excess(state: FieldOnMesh) -> float:
    """Oscillation diagnostic: total variation of the 1D pressure profile in
    excess of its range, relative to the range (0 for monotone profiles)."""
    if state.mesh.dim != 1:
        return 0.0
    p = state.values[:, PRESSURE]
    tv = float(np.abs(np.diff(p)).sum())
    rng = float(p.max() - p.min())
    if rng == 0.0:
        return 0.0
    return (tv - rng) / rng


def boundary_flux_charge(state: FieldOnMesh, mixture: Mixture) -> float:
    """Total charge from the divergence theorem, -lambda^2 * boundary flux of
    phi, using one-sided gradients of the discrete potential."""
    mesh = state.mesh
    phi = state.values[:, 0]
    if mesh.dim != 1:
        raise ConfigurationError("boundary-flux charge check is implemented in 1D")
    x = mesh.nodes[:, 0]
    flux_left = -(phi[1] - phi[0]) / (x[1] - x[0])       # outward normal -x
    flux_right = (phi[-1] - phi[-2]) / (x[-1] - x[-2])   # outward normal +x
    return -mixture.lambda2 * (flux_left + flux_right)
