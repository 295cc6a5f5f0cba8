import numpy as np
import pytest

from edlfem import physics
from edlfem.errors import DomainError
from edlfem.physics import (
    BulkModulus,
    Incompressible,
    Mixture,
    PhysicalConstants,
    Species,
    StateSample,
    chemical_potential,
    dimensionless_groups,
    flux_potential_and_derivatives,
    fraction_from_molarity,
    free_charge,
    gibbs_energy,
    number_density,
)


def ternary(compressibility=None, kappa=0.0, g_ref=0.0):
    return Mixture(
        species=(Species(z=-1, kappa=kappa, g_ref=g_ref),
                 Species(z=1, kappa=kappa, g_ref=g_ref),
                 Species(z=0)),
        lambda2=8.553e-6,
        a2=7.5412e-4,
        compressibility=compressibility or Incompressible(),
    )


class TestDimensionlessGroups:
    def test_baseline_matches_reported_values(self):
        # T=293.75 K, n_ref=55 mol/L, p_ref=1 atm, L_ref=20 nm, chi=80
        lambda2, a2 = dimensionless_groups(PhysicalConstants())
        assert lambda2 == pytest.approx(8.553e-6, rel=5e-4)
        assert a2 == pytest.approx(7.5412e-4, rel=5e-4)

    def test_scaling_in_reference_density(self):
        base = PhysicalConstants()
        scaled = PhysicalConstants(n_ref=4 * base.n_ref)
        l2a, a2a = dimensionless_groups(base)
        l2b, a2b = dimensionless_groups(scaled)
        assert l2b == pytest.approx(l2a / 4, rel=1e-14)
        assert a2b == pytest.approx(a2a / 4, rel=1e-14)

    def test_identity_substitution(self):
        c = PhysicalConstants(T=1, n_ref=1, p_ref=1, L_ref=1, chi=0, e0=1, k=1, eps0=1)
        assert dimensionless_groups(c) == (1.0, 1.0)

    def test_rejects_nonpositive_input(self):
        with pytest.raises(DomainError):
            dimensionless_groups(PhysicalConstants(T=-1.0))


class TestMixtureInvariants:
    def test_solvent_must_be_last_and_neutral(self):
        with pytest.raises(DomainError):
            Mixture(species=(Species(z=1), Species(z=-1)), lambda2=1.0, a2=1.0)

    def test_only_one_neutral_species(self):
        with pytest.raises(DomainError):
            Mixture(species=(Species(z=0), Species(z=1), Species(z=0)),
                    lambda2=1.0, a2=1.0)

    def test_positive_groups_required(self):
        with pytest.raises(DomainError):
            Mixture(species=(Species(z=-1), Species(z=0)), lambda2=-1.0, a2=1.0)

    def test_bulk_modulus_positive(self):
        with pytest.raises(DomainError):
            BulkModulus(0.0)


class TestGibbsEnergy:
    def test_reference_state(self):
        m = ternary(kappa=8.0, g_ref=0.25)
        assert gibbs_energy(1.0, m.species[0], m) == pytest.approx(0.25)

    def test_incompressible_direct_substitution(self):
        m = ternary(kappa=8.0)
        # (kappa+1) * a2 * (p-1) at p=2
        assert gibbs_energy(2.0, m.species[0], m) == pytest.approx(9 * 7.5412e-4)

    def test_bulk_modulus_series_limit(self):
        # K ln(1 + (p-1)/K) -> (p-1) with error ~ (p-1)^2 (kappa+1) a2 / (2K)
        p, kappa, a2 = 2.0, 8.0, 7.5412e-4
        inc = gibbs_energy(p, ternary(kappa=kappa).species[0], ternary(kappa=kappa))
        errors = []
        for K in (1e3, 1e4, 1e5):
            m = ternary(compressibility=BulkModulus(K), kappa=kappa)
            errors.append(abs(gibbs_energy(p, m.species[0], m) - inc))
        assert errors[0] > errors[1] > errors[2]
        for K, err in zip((1e3, 1e4, 1e5), errors):
            predicted = (p - 1) ** 2 * (kappa + 1) * a2 / (2 * K)
            assert err == pytest.approx(predicted, rel=2e-3)

    def test_log_domain_violation(self):
        m = ternary(compressibility=BulkModulus(10.0))
        with pytest.raises(DomainError):
            gibbs_energy(-10.0, m.species[0], m)


class TestChemicalPotential:
    def test_near_unity_fraction(self):
        m = ternary()
        eps = 1e-6
        assert chemical_potential(1 - eps, 1.0, m.species[0], m) == pytest.approx(
            np.log(1 - eps)
        )

    def test_difference_has_no_pressure_dependence_without_solvation(self):
        m = ternary()
        for p in (0.5, 1.0, 7.0):
            mu_a = chemical_potential(0.2, p, m.species[0], m)
            mu_n = chemical_potential(0.5, p, m.species[-1], m)
            assert mu_a - mu_n == pytest.approx(np.log(0.2 / 0.5))

    @pytest.mark.parametrize("bad", [0.0, -0.5, 1.0, 1.5, 1e-120])
    def test_rejects_out_of_range_fraction(self, bad):
        m = ternary()
        with pytest.raises(DomainError):
            chemical_potential(bad, 1.0, m.species[0], m)

    def test_strictly_increasing_in_fraction(self):
        m = ternary(kappa=3.0)
        ys = np.linspace(0.05, 0.9, 40)
        mus = [chemical_potential(y, 2.0, m.species[0], m) for y in ys]
        assert all(b > a for a, b in zip(mus, mus[1:]))


class TestNumberDensity:
    def test_incompressible_is_unity(self):
        m = ternary()
        for p in (-3.0, 1.0, 40.0):
            assert number_density(p, m) == 1.0

    def test_compressible_values(self):
        m = ternary(compressibility=BulkModulus(1500.0))
        assert number_density(2.0, m) == pytest.approx(1 + 1 / 1500)
        assert number_density(1.0, m) == 1.0


class TestFreeCharge:
    def test_symmetric_ternary_neutral(self):
        m = ternary()
        assert free_charge(StateSample(0.3, 1.0, (0.25, 0.25)), m) == 0.0

    def test_bulk_case_a_neutrality(self):
        m = Mixture(
            species=(Species(z=-1), Species(z=1), Species(z=2), Species(z=0)),
            lambda2=1.0, a2=1.0,
        )
        sample = StateSample(0.0, 1.0, (3 / 6, 1 / 6, 1 / 6))
        assert free_charge(sample, m) == pytest.approx(0.0, abs=1e-15)

    def test_direct_substitution(self):
        m = Mixture(species=(Species(z=-1), Species(z=1), Species(z=0)),
                    lambda2=1.0, a2=1.0)
        assert free_charge(StateSample(0.0, 1.0, (0.5, 0.1)), m) == pytest.approx(-0.4)

    def test_linear_in_each_fraction(self):
        m = ternary(compressibility=BulkModulus(1500.0))
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = rng.uniform(0.5, 3.0)
            y = rng.dirichlet([4, 4, 4])[:2]
            d = 1e-3
            up = free_charge(StateSample(0.0, p, (y[0] + d, y[1])), m)
            down = free_charge(StateSample(0.0, p, (y[0] - d, y[1])), m)
            slope = (up - down) / (2 * d)
            assert slope == pytest.approx(number_density(p, m) * m.charges[0], rel=1e-10)


class TestFluxPotential:
    def test_no_solvation_has_no_pressure_coupling(self):
        m = ternary()
        _, dw_dp, _, _ = flux_potential_and_derivatives(
            StateSample(0.1, 2.0, (0.3, 0.3)), m.species[0], m
        )
        assert dw_dp == 0.0

    def test_equal_thirds_fraction_derivative(self):
        m = ternary()
        _, _, dw_dy, _ = flux_potential_and_derivatives(
            StateSample(0.0, 1.0, (1 / 3, 1 / 3)), m.species[0], m
        )
        assert dw_dy[0] == pytest.approx(6.0)
        assert dw_dy[1] == pytest.approx(3.0)

    def test_derivatives_match_finite_differences(self):
        rng = np.random.default_rng(7)
        step = 1e-6
        mixtures = [
            ternary(kappa=4.0),
            ternary(compressibility=BulkModulus(1500.0), kappa=2.0),
            Mixture(species=(Species(z=-2, kappa=1.0), Species(z=-1), Species(z=1, kappa=5.0),
                             Species(z=0)), lambda2=1e-4, a2=7.5e-4),
        ]
        checked = 0
        while checked < 100:
            m = mixtures[checked % len(mixtures)]
            n_ion = m.n_ions
            y = rng.dirichlet([5.0] * (n_ion + 1))[:n_ion]
            if y.min() < 1e-3 or 1 - y.sum() < 1e-3:
                continue
            sample = StateSample(rng.uniform(-4, 4), rng.uniform(0.5, 3.0), tuple(y))
            alpha = rng.integers(0, n_ion)
            s = m.species[alpha]
            w, dw_dp, dw_dy, dw_dphi = flux_potential_and_derivatives(sample, s, m)

            def w_of(phi, p, yv):
                return flux_potential_and_derivatives(
                    StateSample(phi, p, tuple(yv)), s, m)[0]

            fd_phi = (w_of(sample.phi + step, sample.p, y) - w_of(sample.phi - step, sample.p, y)) / (2 * step)
            fd_p = (w_of(sample.phi, sample.p + step, y) - w_of(sample.phi, sample.p - step, y)) / (2 * step)
            assert abs(fd_phi - dw_dphi) <= 1e-8 * max(1.0, abs(dw_dphi))
            assert abs(fd_p - dw_dp) <= 1e-8 * max(1.0, abs(dw_dp))
            for b in range(n_ion):
                yp, ym = y.copy(), y.copy()
                yp[b] += step
                ym[b] -= step
                fd_y = (w_of(sample.phi, sample.p, yp) - w_of(sample.phi, sample.p, ym)) / (2 * step)
                assert abs(fd_y - dw_dy[b]) <= 1e-8 * max(1.0, abs(dw_dy[b]))
            checked += 1

    def test_invariant_under_common_gibbs_shift(self):
        sample = StateSample(0.7, 1.8, (0.2, 0.35))
        base = ternary(kappa=3.0)
        shifted = Mixture(
            species=tuple(Species(z=s.z, kappa=s.kappa, g_ref=s.g_ref + 2.5)
                          for s in base.species),
            lambda2=base.lambda2, a2=base.a2,
        )
        w0 = flux_potential_and_derivatives(sample, base.species[0], base)[0]
        w1 = flux_potential_and_derivatives(sample, shifted.species[0], shifted)[0]
        assert w1 == pytest.approx(w0)


def test_fraction_from_molarity():
    assert fraction_from_molarity(0.01) == pytest.approx(0.01 / 55)
    assert fraction_from_molarity(10.0) == pytest.approx(10 / 55)
    with pytest.raises(DomainError):
        fraction_from_molarity(0.0)
    with pytest.raises(DomainError):
        fraction_from_molarity(60.0)
