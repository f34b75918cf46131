import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from errors import FormatError
from geometry_core import PointCloud
import mesh_io
from part_library import box_mesh


class TestObj:
    def test_write_then_read_mesh(self, tmp_path):
        mesh = box_mesh((100.0, 10.0, 5.0), center=(0.1, 0.2, 0.3))
        path = tmp_path / "bar.obj"
        mesh_io.write_obj(mesh, path)
        loaded = mesh_io.read_obj(path)
        np.testing.assert_array_equal(loaded.vertices, mesh.vertices)
        np.testing.assert_array_equal(loaded.faces, mesh.faces)

    def test_polygons_and_texture_indices(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text(
            "# a unit square\n"
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
            "vt 0 0\n"
            "f 1/1/1 2/1/1 3/1/1 4/1/1\n"
        )
        mesh = mesh_io.read_obj(path)
        assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_negative_indices(self, tmp_path):
        path = tmp_path / "tri.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
        assert mesh_io.read_obj(path).faces.tolist() == [[0, 1, 2]]

    def test_malformed_record(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 zero 0\n")
        with pytest.raises(FormatError):
            mesh_io.read_obj(path)

    def test_no_vertices(self, tmp_path):
        path = tmp_path / "empty.obj"
        path.write_text("# nothing\n")
        with pytest.raises(FormatError):
            mesh_io.read_obj(path)


class TestPly:
    def test_cloud_coordinates_are_exact(self, tmp_path, rng):
        cloud = PointCloud(rng.uniform(0, 380, size=(50, 3)))
        path = tmp_path / "cloud.ply"
        mesh_io.write_cloud(cloud, path, comments=["units mm"])
        data = mesh_io.read_ply(path)
        np.testing.assert_array_equal(data.points, cloud.points)
        assert data.comments == ["units mm"]
        assert data.faces is None

    def test_scalars_and_faces(self, tmp_path):
        mesh = box_mesh((2.0, 2.0, 2.0))
        values = np.linspace(-1.0, 1.0, 8)
        path = tmp_path / "box.ply"
        mesh_io.write_ply(path, mesh.vertices, faces=mesh.faces, scalars={"deviation": values})
        data = mesh_io.read_ply(path)
        np.testing.assert_array_equal(data.faces, mesh.faces)
        np.testing.assert_allclose(data.scalars["deviation"], values, rtol=5e-9)

    def test_writes_are_byte_identical(self, tmp_path, rng):
        cloud = PointCloud(rng.normal(size=(20, 3)))
        mesh_io.write_cloud(cloud, tmp_path / "a.ply")
        mesh_io.write_cloud(cloud, tmp_path / "b.ply")
        assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()

    def test_not_a_ply(self, tmp_path):
        path = tmp_path / "x.ply"
        path.write_text("solid stl\n")
        with pytest.raises(FormatError):
            mesh_io.read_ply(path)

    def test_truncated_body(self, tmp_path):
        path = tmp_path / "short.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 3\n"
            "property double x\nproperty double y\nproperty double z\nend_header\n0 0 0\n"
        )
        with pytest.raises(FormatError):
            mesh_io.read_ply(path)

    def test_binary_rejected(self, tmp_path):
        path = tmp_path / "bin.ply"
        path.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(FormatError):
            mesh_io.read_ply(path)

    def test_scalar_length_mismatch(self, tmp_path):
        with pytest.raises(FormatError):
            mesh_io.write_ply(tmp_path / "bad.ply", np.zeros((3, 3)), scalars={"deviation": np.zeros(2)})


class TestEdgeList:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "graph.edges"
        mesh_io.write_edge_list([(0, 1), (1, 2), (0, 2)], path)
        assert mesh_io.read_edge_list(path).tolist() == [[0, 1], [1, 2], [0, 2]]

    def test_bad_line(self, tmp_path):
        path = tmp_path / "graph.edges"
        path.write_text("0 1 2\n")
        with pytest.raises(FormatError):
            mesh_io.read_edge_list(path)

    def test_read_cloud_from_obj(self, tmp_path):
        path = tmp_path / "pts.obj"
        path.write_text("v 1 2 3\nv 4 5 6\n")
        assert mesh_io.read_cloud(path).points.tolist() == [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
