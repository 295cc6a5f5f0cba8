import numpy as np
import pytest

from edlfem import fem
from edlfem.errors import ConfigurationError, FeasibilityError
from edlfem.fem import (
    PHI,
    PRESSURE,
    BoundaryConditionSet,
    DofMap,
    apply_boundary_conditions,
    assemble_system,
    fraction_field,
    integrate_nodal,
)
from edlfem.mesh import FieldOnMesh, build_interval_mesh, build_rectangle_mesh
from edlfem.physics import BulkModulus, Incompressible, Mixture, Species


def ternary(compressible=False, kappa=0.0, lambda2=1e-4, a2=7.5e-4):
    return Mixture(
        species=(Species(z=-1, kappa=kappa), Species(z=1, kappa=kappa), Species(z=0)),
        lambda2=lambda2, a2=a2,
        compressibility=BulkModulus(1500.0) if compressible else Incompressible(),
    )


def uniform_state(mesh, mixture, phi=0.0, p=0.0, y=None):
    n_ion = mixture.n_ions
    y = y if y is not None else [1.0 / (n_ion + 1)] * n_ion
    vals = np.tile(np.array([phi, p, *y]), (mesh.n_nodes, 1))
    return FieldOnMesh(mesh, vals)


def random_admissible_state(mesh, mixture, rng, phi_scale=2.0):
    n_ion = mixture.n_ions
    vals = np.empty((mesh.n_nodes, n_ion + 2))
    vals[:, PHI] = rng.uniform(-phi_scale, phi_scale, mesh.n_nodes)
    vals[:, PRESSURE] = rng.uniform(0.5, 3.0, mesh.n_nodes)
    vals[:, 2:] = rng.dirichlet([5.0] * (n_ion + 1), mesh.n_nodes)[:, :n_ion]
    return FieldOnMesh(mesh, vals)


class TestDofMap:
    def test_bijection(self):
        dm = DofMap(n_nodes=5, n_fields=4)
        assert dm.n_dofs == 20
        seen = {int(dm.index(n, f)) for n in range(5) for f in range(4)}
        assert seen == set(range(20))


class TestBoundaryConditionSet:
    def test_dirichlet_neumann_overlap_rejected(self):
        with pytest.raises(ConfigurationError):
            BoundaryConditionSet(
                dirichlet={("left", PHI): 1.0},
                neumann={("left", PHI): 0.5},
            )

    def test_disjoint_fields_allowed(self):
        BoundaryConditionSet(
            dirichlet={("left", PHI): 1.0},
            neumann={("left", PRESSURE): 0.5},
        )


class TestResidual:
    def test_uniform_neutral_state_has_zero_interior_residual(self):
        mixture = ternary()
        mesh = build_interval_mesh(0, 1, 16)
        bcs = BoundaryConditionSet(dirichlet={("right", PRESSURE): 0.0})
        state = uniform_state(mesh, mixture, phi=0.3, p=0.0, y=[1 / 3, 1 / 3])
        sys = assemble_system(state, mesh, mixture, bcs)
        assert np.abs(sys.residual).max() < 1e-13

    def test_residual_length(self):
        mixture = ternary()
        mesh = build_rectangle_mesh(1, 1, 3, 3)
        state = uniform_state(mesh, mixture, y=[1 / 3, 1 / 3])
        sys = assemble_system(state, mesh, mixture, BoundaryConditionSet())
        assert sys.residual.shape == (mesh.n_nodes * 4,)

    def test_inadmissible_state_identifies_cell(self):
        mixture = ternary()
        mesh = build_interval_mesh(0, 1, 8)
        state = uniform_state(mesh, mixture, y=[1 / 3, 1 / 3])
        state.values[5, 2] = -0.4   # drives quadrature fractions negative
        with pytest.raises(FeasibilityError) as err:
            assemble_system(state, mesh, mixture, BoundaryConditionSet())
        assert err.value.cell in (4, 5)

    def test_gauge_property_constant_phi_shift(self):
        mixture = ternary(compressible=True)
        mesh = build_interval_mesh(0, 1, 12)
        rng = np.random.default_rng(5)
        state = random_admissible_state(mesh, mixture, rng)
        bcs = BoundaryConditionSet()
        base = assemble_system(state, mesh, mixture, bcs).residual
        shifted = state.copy()
        shifted.values[:, PHI] += 3.7
        other = assemble_system(shifted, mesh, mixture, bcs).residual
        assert np.abs(base - other).max() < 1e-9


class TestQuadratureExactness:
    def test_1d_stiffness_and_mass(self):
        mesh = build_interval_mesh(0, 1, 1)
        ws = fem._workspace(mesh)
        h = 1.0
        grads, wq, N = ws["grads"], ws["wq"], ws["N"]
        stiff = np.einsum("q,id,jd->ij", wq[0], grads[0], grads[0])
        assert np.allclose(stiff, np.array([[1, -1], [-1, 1]]) / h, atol=1e-13)
        mass = np.einsum("q,qi,qj->ij", wq[0], N, N)
        assert np.allclose(mass, h * np.array([[2, 1], [1, 2]]) / 6, atol=1e-13)

    def test_triangle_stiffness_and_mass(self):
        mesh = build_rectangle_mesh(1, 1, 1, 1)
        ws = fem._workspace(mesh)
        c = 0   # triangle (0,0)-(1,0)-(1,1)
        area = 0.5
        mass = np.einsum("q,qi,qj->ij", ws["wq"][c], ws["N"], ws["N"])
        assert np.allclose(mass, area * (np.ones((3, 3)) + np.eye(3)) / 12, atol=1e-13)
        stiff = np.einsum("q,id,jd->ij", ws["wq"][c], ws["grads"][c], ws["grads"][c])
        assert np.allclose(stiff.sum(axis=0), 0.0, atol=1e-13)
        assert np.allclose(stiff, stiff.T, atol=1e-13)


class TestJacobian:
    @pytest.mark.parametrize("dim", [1, 2])
    @pytest.mark.parametrize("compressible", [False, True])
    def test_matches_finite_differences(self, dim, compressible):
        mixture = ternary(compressible=compressible)
        mesh = build_interval_mesh(0, 1, 6) if dim == 1 else build_rectangle_mesh(1, 1, 3, 3)
        rng = np.random.default_rng(42 + dim)
        state = random_admissible_state(mesh, mixture, rng)
        bcs = BoundaryConditionSet(neumann={("left", PHI): 1.5})
        sys = assemble_system(state, mesh, mixture, bcs)
        J = sys.jacobian.tocsc()
        n = sys.residual.size
        h = 1e-7
        for j in rng.choice(n, 20, replace=False):
            xp = state.values.reshape(-1).copy()
            xm = xp.copy()
            xp[j] += h
            xm[j] -= h
            rp = assemble_system(FieldOnMesh(mesh, xp), mesh, mixture, bcs).residual
            rm = assemble_system(FieldOnMesh(mesh, xm), mesh, mixture, bcs).residual
            fd = (rp - rm) / (2 * h)
            col = np.asarray(J[:, j].todense()).ravel()
            err = np.abs(fd - col).max() / max(np.abs(col).max(), 1.0)
            assert err <= 1e-5

    def test_sparsity_couples_only_shared_cells(self):
        mixture = ternary()
        mesh = build_interval_mesh(0, 1, 10)
        state = uniform_state(mesh, mixture, y=[0.3, 0.3])
        sys = assemble_system(state, mesh, mixture, BoundaryConditionSet())
        coo = sys.jacobian.tocoo()
        node_i, node_j = coo.row // 4, coo.col // 4
        assert np.abs(node_i - node_j).max() <= 1


class TestBoundaryTerms:
    def test_dirichlet_row_replacement(self):
        mixture = ternary()
        mesh = build_interval_mesh(0, 1, 8)
        state = uniform_state(mesh, mixture, phi=0.3, y=[1 / 3, 1 / 3])
        bcs = BoundaryConditionSet(
            dirichlet={("right", PHI): 0.0, ("right", PRESSURE): 0.0,
                       ("right", fraction_field(0)): 1 / 3},
        )
        sys = apply_boundary_conditions(assemble_system(state, mesh, mixture, bcs), state, bcs)
        dm = sys.dofmap
        i = int(dm.index(mesh.n_nodes - 1, PHI))
        assert sys.residual[i] == pytest.approx(0.3)
        row = sys.jacobian.getrow(i).toarray().ravel()
        expected = np.zeros_like(row)
        expected[i] = 1.0
        assert np.allclose(row, expected)

    def test_pressure_pin_required(self):
        mixture = ternary()
        mesh = build_interval_mesh(0, 1, 8)
        state = uniform_state(mesh, mixture, y=[1 / 3, 1 / 3])
        bcs = BoundaryConditionSet(dirichlet={("right", PHI): 0.0})
        with pytest.raises(ConfigurationError):
            apply_boundary_conditions(assemble_system(state, mesh, mixture, bcs), state, bcs)

    def test_point_pin_counts_as_pressure_dirichlet(self):
        mixture = ternary()
        mesh = build_rectangle_mesh(1, 1, 4, 4)
        state = uniform_state(mesh, mixture, y=[1 / 3, 1 / 3])
        bcs = BoundaryConditionSet(pins=((PRESSURE, (0.0, 0.5), 0.25),))
        sys = apply_boundary_conditions(assemble_system(state, mesh, mixture, bcs), state, bcs)
        node = int(np.argmin(np.linalg.norm(mesh.nodes - np.array([0.0, 0.5]), axis=1)))
        assert sys.residual[sys.dofmap.index(node, PRESSURE)] == pytest.approx(-0.25)

    def test_homogeneous_neumann_contributes_nothing(self):
        mixture = ternary()
        mesh = build_interval_mesh(0, 1, 8)
        state = uniform_state(mesh, mixture, phi=0.2, y=[1 / 3, 1 / 3])
        plain = BoundaryConditionSet(dirichlet={("right", PRESSURE): 0.0})
        with_h = BoundaryConditionSet(dirichlet={("right", PRESSURE): 0.0},
                                      neumann={("left", PRESSURE): 0.0})
        r0 = assemble_system(state, mesh, mixture, plain).residual
        r1 = assemble_system(state, mesh, mixture, with_h).residual
        assert np.allclose(r0, r1)

    def test_diode_stripe_total_facet_load(self):
        # constant h over the lower stripe integrates to -sigma * 0.025
        sigma = 350.0
        mixture = ternary()
        mesh = build_rectangle_mesh(0.02, 0.1, 4, 40)
        state = uniform_state(mesh, mixture, y=[0.01, 0.01])

        def stripe(coords):
            y = coords[:, 1]
            out = np.zeros(len(coords))
            out[(y >= 0.025) & (y < 0.05)] = -sigma
            return out

        base = BoundaryConditionSet()
        loaded = BoundaryConditionSet(neumann={("right", PHI): stripe})
        r0 = assemble_system(state, mesh, mixture, base).residual
        r1 = assemble_system(state, mesh, mixture, loaded).residual
        # residual holds -integral(h v); summing over nodes gives -integral(h)
        total = (r1 - r0).sum()
        assert total == pytest.approx(sigma * 0.025, rel=1e-12)


def test_integrate_nodal_matches_closed_form():
    mesh = build_interval_mesh(0, 2, 64)
    x = mesh.nodes[:, 0]
    assert integrate_nodal(mesh, np.ones_like(x)) == pytest.approx(2.0, abs=1e-13)
    assert integrate_nodal(mesh, x) == pytest.approx(2.0, abs=1e-13)
    mesh2 = build_rectangle_mesh(2.0, 1.0, 8, 8)
    vals = 3.0 + mesh2.nodes[:, 0] + 2 * mesh2.nodes[:, 1]
    assert integrate_nodal(mesh2, vals) == pytest.approx(6 + 2 + 2, abs=1e-12)
