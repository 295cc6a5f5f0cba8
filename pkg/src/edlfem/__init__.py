"""Finite element solver for a thermodynamically consistent electrolyte model.

Solves the stationary, dimensionless system for the electrostatic potential,
pressure and ion fractions in 1D and 2D, alongside a classical
Nernst-Planck/Poisson-Boltzmann comparator.
"""

__version__ = "0.1.0"
