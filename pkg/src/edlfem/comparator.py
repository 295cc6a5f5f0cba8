"""Classical Nernst-Planck baseline in its equilibrium Poisson-Boltzmann form.

At equilibrium the NP fluxes vanish and every ion fraction follows a
Boltzmann factor of the potential, y_a(x) = y_a^R exp(-z_a (phi - phi^R)).
Inserting this closure into the Poisson equation leaves a single semilinear
equation for phi, solved with the same damped-Newton machinery as the full
model.  The reconstructed fractions are deliberately not clamped to [0, 1]:
their divergence at strong bias is the point of the comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .mesh import FieldOnMesh, Mesh
from .solver import NewtonConfig, SolveReport, solve_scalar_potential


@dataclass
class PBProblem:
    mesh: Mesh
    lambda2: float
    charges: np.ndarray            # ion charge numbers (length N-1)
    y_bulk: np.ndarray             # bulk fractions matching `charges`
    phi_dirichlet: dict[str, float]
    phi_bulk: float = 0.0          # reference value phi^R of the Boltzmann factors

    def __post_init__(self):
        self.charges = np.asarray(self.charges, dtype=float)
        self.y_bulk = np.asarray(self.y_bulk, dtype=float)
        resid = float(self.charges @ self.y_bulk)
        if abs(resid) > 1e-12:
            raise ConfigurationError(f"bulk is not electroneutral: sum z*y = {resid:g}")


def _boltzmann_density(prob: PBProblem):
    z = prob.charges[:, None, None]
    yb = prob.y_bulk[:, None, None]

    def rho(phi_q: np.ndarray):
        with np.errstate(over="ignore"):
            boltz = yb * np.exp(-z * (phi_q[None] - prob.phi_bulk))
        return (z * boltz).sum(axis=0), (-(z**2) * boltz).sum(axis=0)

    return rho


def solve_poisson_boltzmann(
    prob: PBProblem, cfg: NewtonConfig | None = None, delta_max: float = 1.0
) -> tuple[FieldOnMesh, FieldOnMesh, SolveReport]:
    """Solve for phi, then reconstruct the (unclamped) ion fractions."""
    phi, report = solve_scalar_potential(
        prob.mesh, prob.lambda2, _boltzmann_density(prob), prob.phi_dirichlet,
        phi_bulk=prob.phi_bulk, cfg=cfg, delta_max=delta_max,
    )
    y = prob.y_bulk[None, :] * np.exp(-prob.charges[None, :] * (phi[:, None] - prob.phi_bulk))
    return FieldOnMesh(prob.mesh, phi), FieldOnMesh(prob.mesh, y), report


def np_free_charge(y_values: np.ndarray, charges: np.ndarray) -> np.ndarray:
    """NP free charge density sum_a z_a y_a (no number-density factor)."""
    return np.asarray(y_values) @ np.asarray(charges, dtype=float)


def np_capacitance_sweep(phi_grid, make_problem, cfg: NewtonConfig | None = None):
    """Charge and capacitance of the NP comparator on a uniform bias grid,
    using the same Q and dQ/dphi definitions applied to its own free charge."""
    from .analysis import CapacitanceCurve, _capacitance_from_charge
    from .fem import integrate_nodal

    grid = np.asarray(phi_grid, dtype=float)
    delta = grid[1] - grid[0]
    q = np.empty(len(grid))
    for i, bias in enumerate(grid):
        prob = make_problem(bias)
        _, y, _ = solve_poisson_boltzmann(prob, cfg)
        q[i] = integrate_nodal(prob.mesh, np_free_charge(y.values, prob.charges))
    return CapacitanceCurve(grid, q, _capacitance_from_charge(q, delta))
