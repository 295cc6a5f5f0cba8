import numpy as np
import pytest

from edlfem.errors import ConfigurationError
from edlfem.mesh import (
    FieldOnMesh,
    build_interval_mesh,
    build_rectangle_mesh,
    dump_mesh_csv,
    interpolate_p1,
)


class TestIntervalMesh:
    def test_uniform_partition(self):
        mesh = build_interval_mesh(0.0, 1.0, 4)
        assert np.allclose(mesh.nodes[:, 0], [0, 0.25, 0.5, 0.75, 1.0])
        assert mesh.n_cells == 4

    def test_minimal_mesh(self):
        mesh = build_interval_mesh(0.0, 1.0, 1)
        assert mesh.n_nodes == 2
        assert mesh.n_cells == 1

    def test_inverted_interval_rejected(self):
        with pytest.raises(ConfigurationError):
            build_interval_mesh(1.0, 0.0, 4)

    def test_boundary_tags(self):
        mesh = build_interval_mesh(-2.0, 3.0, 7)
        assert mesh.nodes_for("left").tolist() == [0]
        assert mesh.nodes_for("right").tolist() == [7]
        with pytest.raises(ConfigurationError):
            mesh.facets_for("top")

    def test_measures_sum_to_length(self):
        mesh = build_interval_mesh(0.2, 1.7, 13)
        assert mesh.cell_measures().sum() == pytest.approx(1.5, abs=1e-12)


class TestRectangleMesh:
    def test_unit_square_minimal(self):
        mesh = build_rectangle_mesh(1.0, 1.0, 1, 1)
        assert mesh.n_nodes == 4
        assert mesh.n_cells == 2
        assert len(mesh.facets) == 4

    def test_diode_mesh_counts(self):
        mesh = build_rectangle_mesh(0.02, 0.1, 8, 40)
        assert mesh.n_nodes == 369
        assert mesh.n_cells == 640

    def test_total_area(self):
        mesh = build_rectangle_mesh(0.02, 0.1, 8, 40)
        assert mesh.cell_measures().sum() == pytest.approx(0.002, abs=1e-12)
        assert (mesh.cell_measures() > 0).all()

    def test_every_boundary_node_tagged_and_tags_unique(self):
        mesh = build_rectangle_mesh(1.0, 2.0, 3, 4)
        on_boundary = (
            np.isclose(mesh.nodes[:, 0], 0) | np.isclose(mesh.nodes[:, 0], 1)
            | np.isclose(mesh.nodes[:, 1], 0) | np.isclose(mesh.nodes[:, 1], 2)
        )
        tagged = np.unique(mesh.facets)
        assert set(tagged) == set(np.nonzero(on_boundary)[0])
        # a facet appears under exactly one tag
        seen = {}
        for facet, tag in mesh.boundary_facets:
            key = tuple(sorted(facet))
            assert key not in seen
            seen[key] = tag

    def test_mirror_symmetric_triangulation_for_even_rows(self):
        # reflection y -> Ly - y must map cells to cells
        mesh = build_rectangle_mesh(1.0, 1.0, 2, 4)
        nx, ny = 2, 4
        idx = np.arange(mesh.n_nodes)
        i, j = idx % (nx + 1), idx // (nx + 1)
        mirror = (ny - j) * (nx + 1) + i
        cells = {tuple(sorted(c)) for c in mesh.cells.tolist()}
        mirrored = {tuple(sorted(mirror[c] for c in cell)) for cell in cells}
        assert cells == mirrored


class TestInterpolation:
    def test_identity(self):
        mesh = build_interval_mesh(0, 1, 8)
        f = FieldOnMesh(mesh, np.sin(mesh.nodes[:, 0]))
        g = interpolate_p1(f, mesh)
        assert np.allclose(g.values, f.values)

    def test_reproduces_linears(self):
        coarse = build_interval_mesh(0, 1, 3)
        fine = build_interval_mesh(0, 1, 64)
        f = FieldOnMesh(coarse, 2.5 * coarse.nodes[:, 0] - 1.0)
        g = interpolate_p1(f, fine)
        assert np.allclose(g.values[:, 0], 2.5 * fine.nodes[:, 0] - 1.0, atol=1e-14)

    def test_chord_value_at_cell_midpoint(self):
        # x^2 sampled on {0, 0.5, 1}; the interpolant at 0.75 is the chord value
        coarse = build_interval_mesh(0, 1, 2)
        f = FieldOnMesh(coarse, coarse.nodes[:, 0] ** 2)
        fine = build_interval_mesh(0, 1, 4)
        g = interpolate_p1(f, fine)
        assert g.values[3, 0] == pytest.approx((0.25 + 1.0) / 2)
        assert g.values[3, 0] != pytest.approx(0.75**2)

    def test_outside_domain_rejected(self):
        coarse = build_interval_mesh(0, 0.5, 4)
        fine = build_interval_mesh(0, 1, 4)
        with pytest.raises(ConfigurationError):
            interpolate_p1(FieldOnMesh(coarse, coarse.nodes[:, 0]), fine)

    def test_2d_reproduces_linears(self):
        coarse = build_rectangle_mesh(1.0, 1.0, 3, 5)
        fine = build_rectangle_mesh(1.0, 1.0, 11, 13)
        plane = 1.0 + 2.0 * coarse.nodes[:, 0] - 0.5 * coarse.nodes[:, 1]
        g = interpolate_p1(FieldOnMesh(coarse, plane), fine)
        expected = 1.0 + 2.0 * fine.nodes[:, 0] - 0.5 * fine.nodes[:, 1]
        assert np.allclose(g.values[:, 0], expected, atol=1e-13)

    def test_2d_matches_bruteforce(self):
        coarse = build_rectangle_mesh(1.0, 1.0, 4, 6)
        fine = build_rectangle_mesh(1.0, 1.0, 7, 5)
        rng = np.random.default_rng(11)
        f = FieldOnMesh(coarse, rng.normal(size=coarse.n_nodes))
        fast = interpolate_p1(f, fine)
        from edlfem.mesh import _interp_2d_bruteforce

        slow = _interp_2d_bruteforce(f, fine.nodes)
        assert np.allclose(fast.values, slow, atol=1e-12)


def test_field_on_mesh_shape_checks():
    mesh = build_interval_mesh(0, 1, 4)
    f = FieldOnMesh(mesh, np.zeros(10))
    assert f.n_components == 2
    with pytest.raises(ConfigurationError):
        FieldOnMesh(mesh, np.zeros(7))


def test_mesh_csv_dump(tmp_path):
    mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
    paths = dump_mesh_csv(mesh, tmp_path)
    assert [p.name for p in paths] == ["nodes.csv", "cells.csv", "facets.csv"]
    lines = (tmp_path / "nodes.csv").read_text().strip().splitlines()
    assert len(lines) == mesh.n_nodes + 1
