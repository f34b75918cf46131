import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from errors import ArgumentError, DisconnectedSurfaceError, ResolutionLimitError
from geometry_core import TriangleMesh
from part_library import bar_mesh, cube_mesh, egg_plate_mesh
from remesh import (
    DIAGONAL_ACCEPTANCE,
    IsoGraph,
    SurfaceShell,
    default_voxel_size,
    diffusion_wrap,
    isometry_report,
    read_isograph,
    remesh,
    surface_voxels,
    triangle_box_overlap,
    voxelize,
    write_isograph,
)


class TestVoxelize:
    def test_cube_faces_land_on_voxel_centres(self):
        grid = voxelize(cube_mesh(20.0), voxel_size=5.0)
        assert grid.dims == (7, 7, 7)
        # hollow 5x5x5 shell
        assert grid.occupied_count() == 5**3 - 3**3
        np.testing.assert_allclose(grid.centers(np.array([[1, 1, 1]])), [[-10.0, -10.0, -10.0]])

    def test_resolution_limit(self):
        with pytest.raises(ResolutionLimitError):
            voxelize(bar_mesh(), voxel_size=0.01)

    def test_rejects_non_positive_size(self):
        with pytest.raises(ArgumentError):
            voxelize(cube_mesh(1.0), voxel_size=0.0)

    def test_default_voxel_size(self):
        assert default_voxel_size(cube_mesh(10.0)) == pytest.approx(np.sqrt(300.0) / 200.0)


class TestTriangleBoxOverlap:
    triangle = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    def test_inside(self):
        assert triangle_box_overlap(self.triangle, np.array([0.2, 0.2, 0.0]), 0.1)

    def test_above_plane(self):
        assert not triangle_box_overlap(self.triangle, np.array([0.2, 0.2, 0.5]), 0.1)

    def test_beyond_hypotenuse(self):
        assert not triangle_box_overlap(self.triangle, np.array([0.8, 0.8, 0.0]), 0.1)

    def test_touching_counts(self):
        assert triangle_box_overlap(self.triangle, np.array([-0.1, 0.5, 0.0]), 0.1)


class TestSurfaceVoxels:
    def test_solid_block_keeps_only_the_skin(self):
        from remesh import VoxelGrid

        occupancy = np.zeros((7, 7, 7), dtype=bool)
        occupancy[1:6, 1:6, 1:6] = True
        shell = surface_voxels(VoxelGrid(np.zeros(3), 1.0, occupancy))
        assert len(shell) == 5**3 - 3**3
        assert (3, 3, 3) not in shell.as_set()

    def test_empty_grid(self):
        from remesh import VoxelGrid

        with pytest.raises(ArgumentError):
            surface_voxels(VoxelGrid(np.zeros(3), 1.0, np.zeros((3, 3, 3), dtype=bool)))


class TestDiffusionWrap:
    def test_one_vertex_per_surface_voxel(self, cube_shell_graph):
        assert cube_shell_graph.vertex_count == 98
        assert cube_shell_graph.is_connected()

    def test_vertices_are_voxel_centres(self, chamber):
        mesh = cube_mesh(20.0, center=chamber.center)
        shell = surface_voxels(voxelize(mesh, 5.0))
        graph = diffusion_wrap(shell, seed=0)
        np.testing.assert_allclose(graph.vertices, shell.centers())

    def test_deterministic_per_seed(self, chamber):
        mesh = cube_mesh(20.0, center=chamber.center)
        a = remesh(mesh, voxel_size=5.0, seed=4)
        b = remesh(mesh, voxel_size=5.0, seed=4)
        np.testing.assert_array_equal(a.edges, b.edges)
        np.testing.assert_array_equal(a.faces, b.faces)

    def test_every_face_adjacent_pair_is_an_edge(self, cube_shell_graph):
        lengths = cube_shell_graph.edge_lengths()
        face_pairs = int(np.isclose(lengths, 5.0).sum())
        vertices = cube_shell_graph.vertices
        coords = np.round((vertices - vertices.min(axis=0)) / 5.0).astype(int)
        expected = 0
        as_set = {tuple(c) for c in coords}
        for c in as_set:
            for axis in range(3):
                step = np.zeros(3, dtype=int)
                step[axis] = 1
                expected += tuple(np.array(c) + step) in as_set
        assert face_pairs == expected

    def test_isometry(self, cube_shell_graph):
        report = isometry_report(cube_shell_graph)
        assert report.mean > 0
        assert report.cv <= 0.3

    def test_faces_point_outward(self, cube_shell_graph):
        corners = cube_shell_graph.vertices[cube_shell_graph.faces]
        centroid = cube_shell_graph.vertices.mean(axis=0)
        normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        # triangles lying in the cube side planes
        flat = np.abs(normals).max(axis=1) > 0.99
        assert flat.sum() > 0
        outward = np.einsum("ij,ij->i", normals[flat], corners[flat].mean(axis=1) - centroid)
        assert np.all(outward > 0)

    @pytest.mark.parametrize(
        "mesh, voxel_size",
        [(cube_mesh(20.0), 5.0), (bar_mesh(), 2.5), (egg_plate_mesh(), 2.0)],
        ids=["cube", "bar", "egg-plate"],
    )
    def test_every_edge_lies_on_a_face(self, mesh, voxel_size):
        graph = remesh(mesh, voxel_size=voxel_size, seed=0)
        faces = graph.faces
        sides = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
        on_faces = {tuple(pair) for pair in sides.tolist()}
        assert {tuple(edge) for edge in graph.edges.tolist()} <= on_faces
        assert np.all(graph.degrees() > 0)
        assert graph.is_connected()

    def test_disconnected_shell(self):
        coords = np.array([[1, 1, 1], [5, 5, 5]])
        shell = SurfaceShell(coords, np.zeros(3), 1.0, (7, 7, 7))
        with pytest.raises(DisconnectedSurfaceError):
            diffusion_wrap(shell, seed=0)

    def test_acceptance_probability(self):
        assert DIAGONAL_ACCEPTANCE == pytest.approx(0.1767766953)


class TestIsoGraph:
    def test_csr_neighbors(self):
        graph = IsoGraph(np.eye(3), np.array([[1, 0], [1, 2], [0, 1]]), np.zeros((0, 3)))
        assert graph.edges.tolist() == [[0, 1], [1, 2]]
        assert graph.neighbors(1).tolist() == [0, 2]
        assert graph.degrees().tolist() == [1, 2, 1]

    def test_rejects_self_loops(self):
        with pytest.raises(ArgumentError):
            IsoGraph(np.eye(3), np.array([[1, 1]]), np.zeros((0, 3)))

    def test_components(self):
        graph = IsoGraph(np.eye(3), np.array([[0, 1]]), np.zeros((0, 3)))
        assert graph.component_count() == 2
        assert not graph.is_connected()

    def test_box_normals_point_outward(self, box_graph):
        normals = box_graph.vertex_normals()
        radial = box_graph.vertices - box_graph.vertices.mean(axis=0)
        assert np.all(np.einsum("ij,ij->i", normals, radial) > 0)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0)

    def test_write_read(self, tmp_path, cube_shell_graph):
        sidecar = write_isograph(cube_shell_graph, tmp_path / "graph.ply")
        assert sidecar.exists()
        loaded = read_isograph(tmp_path / "graph.ply")
        np.testing.assert_array_equal(loaded.vertices, cube_shell_graph.vertices)
        np.testing.assert_array_equal(loaded.edges, cube_shell_graph.edges)
        np.testing.assert_array_equal(loaded.faces, cube_shell_graph.faces)

    def test_read_without_sidecar_uses_faces(self, tmp_path, box_graph):
        write_isograph(box_graph, tmp_path / "box.ply")
        (tmp_path / "box.edges").unlink()
        loaded = read_isograph(tmp_path / "box.ply")
        np.testing.assert_array_equal(loaded.edges, box_graph.edges)


class TestRemeshBar:
    def test_bar_shell_is_connected(self):
        graph = remesh(bar_mesh(), voxel_size=2.5, seed=1)
        assert graph.is_connected()
        lo, hi = graph.cloud().bounds()
        np.testing.assert_allclose(hi - lo, [100.0, 10.0, 5.0], atol=1e-9)

    def test_degenerate_mesh(self):
        mesh = TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3)))
        with pytest.raises(ValueError):
            remesh(mesh, voxel_size=1.0)
