"""Pointwise constitutive relations of the dimensionless electrolyte mixture model.

All quantities are dimensionless: the electrostatic potential is measured in
thermal-voltage units, pressure in units of the reference pressure, and
composition as atomic (mole) fractions.  The mixture consists of N species,
the last of which is the neutral solvent (charge 0, solvation number 0).
Every function broadcasts over numpy arrays so the finite element assembly
can evaluate coefficients at all quadrature points at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

# Mole fractions below this floor (or above 1 minus it) are rejected rather
# than clamped; keeping iterates admissible is the solver's job.  The floor
# only guards against zero/negative fractions and log/overflow trouble:
# strongly saturated walls produce genuine fractions down to ~1e-21.
EPS_Y = 1e-100

# SI constants (uncertainty beyond four digits does not matter at these scales)
ELEMENTARY_CHARGE = 1.602e-19    # C
VACUUM_PERMITTIVITY = 8.85e-12   # F/m
BOLTZMANN = 1.381e-23            # J/K
AVOGADRO = 6.022e23              # 1/mol

# Solvent reference molarity used to convert electrolyte molarity to a bulk
# mole fraction: y = M / 55 mol/L.
SOLVENT_MOLARITY = 55.0


@dataclass(frozen=True)
class Species:
    """One mixture constituent: charge number, solvation number, Gibbs offset."""

    z: int
    kappa: float = 0.0
    g_ref: float = 0.0

    def __post_init__(self):
        if self.kappa < 0:
            raise DomainError(f"solvation number must be non-negative, got {self.kappa}")


@dataclass(frozen=True)
class Incompressible:
    """Infinite bulk modulus limit: total number density is constant."""


@dataclass(frozen=True)
class BulkModulus:
    """Finite dimensionless bulk modulus K > 0."""

    K: float

    def __post_init__(self):
        if not self.K > 0:
            raise DomainError(f"bulk modulus must be positive, got {self.K}")


@dataclass(frozen=True)
class Mixture:
    """An ordered list of species plus the two dimensionless groups.

    The last species must be the only neutral one (the solvent) and carries
    no solvation shell.
    """

    species: tuple[Species, ...]
    lambda2: float
    a2: float
    compressibility: Incompressible | BulkModulus = field(default_factory=Incompressible)

    def __post_init__(self):
        if len(self.species) < 2:
            raise DomainError("a mixture needs at least two species (ion + solvent)")
        if not (self.lambda2 > 0 and self.a2 > 0):
            raise DomainError("lambda2 and a2 must be positive")
        solvent = self.species[-1]
        if solvent.z != 0 or solvent.kappa != 0:
            raise DomainError("the last species must be the neutral solvent (z=0, kappa=0)")
        if any(s.z == 0 for s in self.species[:-1]):
            raise DomainError("only the last species may be neutral")
        object.__setattr__(self, "species", tuple(self.species))

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def n_ions(self) -> int:
        """Number of charged species = number of solved fraction fields."""
        return len(self.species) - 1

    @property
    def charges(self) -> np.ndarray:
        """Charge numbers of the charged species (length N-1)."""
        return np.array([s.z for s in self.species[:-1]], dtype=float)

    @property
    def kappas(self) -> np.ndarray:
        return np.array([s.kappa for s in self.species[:-1]], dtype=float)

    @property
    def solvent(self) -> Species:
        return self.species[-1]

    @property
    def incompressible(self) -> bool:
        return isinstance(self.compressibility, Incompressible)


@dataclass(frozen=True)
class StateSample:
    """Pointwise state (phi, p, y_1..y_{N-1}); the solvent fraction is derived."""

    phi: float
    p: float
    y: tuple[float, ...]

    @property
    def y_solvent(self) -> float:
        return 1.0 - sum(self.y)


@dataclass(frozen=True)
class PhysicalConstants:
    """SI inputs of the two dimensionless groups.

    Defaults reproduce the aqueous baseline: T = 293.75 K, a 55 mol/L solvent
    reference density, atmospheric reference pressure, a 20 nm domain and
    water-like susceptibility.
    """

    T: float = 293.75                               # K
    n_ref: float = SOLVENT_MOLARITY * 1e3 * AVOGADRO  # 1/m^3
    p_ref: float = 1.01325e5                        # Pa
    L_ref: float = 20e-9                            # m
    chi: float = 80.0                               # -
    e0: float = ELEMENTARY_CHARGE
    k: float = BOLTZMANN
    eps0: float = VACUUM_PERMITTIVITY


def dimensionless_groups(c: PhysicalConstants) -> tuple[float, float]:
    """Scaled Debye length squared and pressure scaling factor.

    lambda2 = k*T*eps0*(1+chi) / (e0^2 * n_ref * L_ref^2),
    a2 = p_ref / (n_ref * k * T).
    """
    values = (c.T, c.n_ref, c.p_ref, c.L_ref, c.e0, c.k, c.eps0)
    if any(v <= 0 for v in values) or c.chi < 0:
        raise DomainError(f"physical constants must be positive, got {c}")
    lambda2 = c.k * c.T * c.eps0 * (1.0 + c.chi) / (c.e0**2 * c.n_ref * c.L_ref**2)
    a2 = c.p_ref / (c.n_ref * c.k * c.T)
    return lambda2, a2


def fraction_from_molarity(molarity: float, solvent_molarity: float = SOLVENT_MOLARITY) -> float:
    """Bulk mole fraction of an ion species prescribed by molarity (mol/L)."""
    if molarity <= 0 or molarity >= solvent_molarity:
        raise DomainError(f"molarity must lie in (0, {solvent_molarity}) mol/L, got {molarity}")
    return molarity / solvent_molarity


def _check_pressure_domain(p, m: Mixture):
    if isinstance(m.compressibility, BulkModulus):
        K = m.compressibility.K
        bad = np.asarray(1.0 + (np.asarray(p, dtype=float) - 1.0) / K <= 0.0)
        if bad.any():
            offending = np.asarray(p, dtype=float)[bad] if bad.ndim else p
            raise DomainError(f"pressure outside log domain (need p > 1 - K = {1 - K}): p = {offending}")


def gibbs_energy(p, s: Species, m: Mixture):
    """Specific Gibbs energy at pressure p.

    Linear in (p - 1) for the incompressible limit, logarithmic with bulk
    modulus K otherwise; solvation enters through the factor (kappa + 1).
    """
    p = np.asarray(p, dtype=float)
    scale = (s.kappa + 1.0) * m.a2
    if m.incompressible:
        out = s.g_ref + scale * (p - 1.0)
    else:
        _check_pressure_domain(p, m)
        K = m.compressibility.K
        out = s.g_ref + scale * K * np.log1p((p - 1.0) / K)
    return out if out.ndim else float(out)


def _check_fraction(y, what: str = "y"):
    y = np.asarray(y, dtype=float)
    bad = (y < EPS_Y) | (y >= 1.0 - EPS_Y)
    if bad.any():
        raise DomainError(f"mole fraction {what} outside ({EPS_Y}, 1): {y[bad]}")
    return y


def chemical_potential(y_alpha, p, s: Species, m: Mixture):
    """Chemical potential g_alpha(p) + ln(y_alpha); y outside (0, 1) is an error."""
    y_alpha = _check_fraction(y_alpha)
    out = gibbs_energy(p, s, m) + np.log(y_alpha)
    return out if np.asarray(out).ndim else float(out)


def number_density(p, m: Mixture):
    """Total number density: 1 when incompressible, 1 + (p-1)/K otherwise."""
    p = np.asarray(p, dtype=float)
    if m.incompressible:
        out = np.ones_like(p)
    else:
        _check_pressure_domain(p, m)
        out = 1.0 + (p - 1.0) / m.compressibility.K
    return out if out.ndim else float(out)


def number_density_dp(p, m: Mixture):
    """Pressure derivative of the total number density."""
    p = np.asarray(p, dtype=float)
    if m.incompressible:
        out = np.zeros_like(p)
    else:
        out = np.full_like(p, 1.0 / m.compressibility.K)
    return out if out.ndim else float(out)


def free_charge_values(p, y, m: Mixture):
    """Free charge density n(p) * sum_alpha z_alpha y_alpha.

    `y` holds the charged-species fractions along its last axis; the solvent
    carries no charge so it never enters the sum.
    """
    y = np.asarray(y, dtype=float)
    zy = y @ m.charges
    return number_density(p, m) * zy


def free_charge(sample: StateSample, m: Mixture) -> float:
    """Free charge density at one state sample."""
    y = _check_fraction(np.asarray(sample.y, dtype=float))
    _check_fraction(1.0 - y.sum(), "y_solvent")
    return float(free_charge_values(sample.p, y, m))


def pressure_coupling(p, s: Species, m: Mixture):
    """d/dp of the flux potential w = mu_alpha - mu_solvent + z*phi.

    Equals kappa * a2 / n(p); the solvent Gibbs term cancels all but the
    solvation surplus.
    """
    return s.kappa * m.a2 / number_density(p, m)


def pressure_coupling_dp(p, s: Species, m: Mixture):
    """Second pressure derivative of the flux potential (for the Jacobian)."""
    n = number_density(p, m)
    return -s.kappa * m.a2 * number_density_dp(p, m) / n**2


def flux_potential_and_derivatives(
    sample: StateSample, s_alpha: Species, m: Mixture
) -> tuple[float, float, np.ndarray, float]:
    """Flux potential w_alpha and its exact partial derivatives.

    w = (g_alpha - g_solvent) + ln(y_alpha) - ln(y_solvent) + z_alpha * phi.
    Returns (w, dw/dp, dw/dy as an array over the charged species, dw/dphi).
    """
    idx = m.species.index(s_alpha)
    if idx >= m.n_ions:
        raise DomainError("the flux potential is defined for charged species only")
    y = _check_fraction(np.asarray(sample.y, dtype=float))
    y_n = float(1.0 - y.sum())
    _check_fraction(y_n, "y_solvent")
    w = (
        gibbs_energy(sample.p, s_alpha, m)
        - gibbs_energy(sample.p, m.solvent, m)
        + np.log(y[idx])
        - np.log(y_n)
        + s_alpha.z * sample.phi
    )
    dw_dp = pressure_coupling(sample.p, s_alpha, m)
    dw_dy = np.full(m.n_ions, 1.0 / y_n)
    dw_dy[idx] += 1.0 / y[idx]
    return float(w), float(dw_dp), dw_dy, float(s_alpha.z)
