import csv
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from dataset import Sample
from errors import AlignmentError, ArgumentError, FormatError
from evaluation import (
    DeviationReport,
    deviation_report,
    evaluate_compensation,
    export_heatmap,
    improvement,
    prediction_error,
    read_heatmap,
    signed_deviation,
    write_report_csv,
)
from geometry_core import PointCloud
import mesh_io
from print_oracle import oracle_compensation, simulate_print


class OracleCompensator:
    def __init__(self, warp):
        self.warp = warp

    def forward(self, cloud, graph):
        return oracle_compensation(cloud, self.warp)


class IdentityCompensator:
    def forward(self, cloud, graph):
        return cloud


class TestImprovement:
    @pytest.mark.parametrize("baseline, compensated, expected", [(0.76, 0.26, 65.8), (0.65, 0.27, 58.5)])
    def test_reported_rows_at_one_decimal(self, baseline, compensated, expected):
        assert round(improvement(baseline, compensated), 1) == expected

    @pytest.mark.parametrize("baseline, compensated, expected", [(0.5, 0.5, 0.0), (0.2, 0.3, -50.0)])
    def test_percentages(self, baseline, compensated, expected):
        assert improvement(baseline, compensated) == pytest.approx(expected)

    def test_zero_baseline(self):
        with pytest.raises(ArgumentError):
            improvement(0.0, 0.1)


class TestSignedDeviation:
    def test_identical_clouds(self, cube_shell_graph):
        cad = cube_shell_graph.cloud()
        report, field = deviation_report(cad, cad, cube_shell_graph)
        assert (report.min, report.max, report.std, report.abs_mean) == (0.0, 0.0, 0.0, 0.0)
        assert report.improvement is None
        assert len(field) == cube_shell_graph.vertex_count

    @pytest.mark.parametrize("mode", ["nearest", "index"])
    def test_outward_is_positive(self, box_graph, mode):
        cad = box_graph.cloud()
        normals = box_graph.vertex_normals()
        grown = PointCloud(cad.points + 0.5 * normals)
        shrunk = PointCloud(cad.points - 0.5 * normals)
        np.testing.assert_allclose(signed_deviation(cad, grown, box_graph, mode).values, 0.5)
        np.testing.assert_allclose(signed_deviation(cad, shrunk, box_graph, mode).values, -0.5)

    def test_baseline_fills_improvement(self, box_graph):
        cad = box_graph.cloud()
        normals = box_graph.vertex_normals()
        baseline, _ = deviation_report(cad, PointCloud(cad.points + normals), box_graph)
        report, _ = deviation_report(cad, PointCloud(cad.points + 0.25 * normals), box_graph, baseline=baseline)
        assert report.improvement == pytest.approx(75.0)

    def test_bad_mode(self, box_graph):
        cad = box_graph.cloud()
        with pytest.raises(ArgumentError):
            signed_deviation(cad, cad, box_graph, mode="projected")

    def test_index_mode_needs_equal_counts(self, box_graph):
        cad = box_graph.cloud()
        with pytest.raises(AlignmentError):
            signed_deviation(cad, PointCloud(cad.points[:4]), box_graph, mode="index")

    def test_graph_must_match_cad(self, box_graph, cube_shell_graph):
        with pytest.raises(AlignmentError):
            signed_deviation(cube_shell_graph.cloud(), cube_shell_graph.cloud(), box_graph)

    def test_prediction_error(self):
        a = PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        b = PointCloud([[0.0, 0.0, 3.0], [1.0, 0.0, 1.0]])
        assert prediction_error(a, b) == pytest.approx(2.0)


class TestHeatmap:
    def test_export_and_read(self, tmp_path, box_graph):
        cad = box_graph.cloud()
        scan = PointCloud(cad.points + box_graph.vertex_normals() * np.linspace(-1.0, 2.0, 8)[:, None])
        _, field = deviation_report(cad, scan, box_graph, mode="index")
        export_heatmap(field, cad, tmp_path / "heat.ply")
        cloud, loaded, value_range = read_heatmap(tmp_path / "heat.ply")
        np.testing.assert_allclose(loaded.values, field.values, rtol=1e-8)
        np.testing.assert_array_equal(cloud.points, cad.points)
        assert value_range == pytest.approx((-2.0, 2.0))

    def test_zero_field_range(self, tmp_path, box_graph):
        cad = box_graph.cloud()
        _, field = deviation_report(cad, cad, box_graph)
        export_heatmap(field, cad, tmp_path / "flat.ply")
        assert read_heatmap(tmp_path / "flat.ply")[2] == (0.0, 0.0)

    def test_length_mismatch(self, tmp_path, box_graph):
        _, field = deviation_report(box_graph.cloud(), box_graph.cloud(), box_graph)
        with pytest.raises(AlignmentError):
            export_heatmap(field, PointCloud(np.zeros((2, 3))), tmp_path / "x.ply")

    def test_plain_cloud_is_not_a_heatmap(self, tmp_path):
        mesh_io.write_ply(tmp_path / "plain.ply", np.zeros((2, 3)))
        with pytest.raises(FormatError):
            read_heatmap(tmp_path / "plain.ply")


class TestReportCsv:
    def test_columns_and_rounding(self, tmp_path):
        rows = [
            ("baseline", DeviationReport(-0.5, 1.23456, 0.3, 0.712345)),
            ("compensated", DeviationReport(-0.1, 0.2, 0.05, 0.1, improvement=85.96)),
        ]
        write_report_csv(rows, tmp_path / "report.csv")
        with open(tmp_path / "report.csv", newline="") as handle:
            table = list(csv.reader(handle))
        assert table[0] == ["part", "min", "max", "std", "abs_mean", "improvement"]
        assert table[1] == ["baseline", "-0.5000", "1.2346", "0.3000", "0.7123", ""]
        assert table[2][-1] == "85.9600"


class TestEvaluateCompensation:
    def make_samples(self, graph, warp):
        cad = graph.cloud()
        return [Sample("part_000", graph, cad, simulate_print(cad, warp))]

    def test_oracle_compensation_removes_the_warp(self, cube_shell_graph, noiseless_warp):
        samples = self.make_samples(cube_shell_graph, noiseless_warp)
        [row] = evaluate_compensation(samples, OracleCompensator(noiseless_warp), noiseless_warp)
        assert row.part_id == "part_000"
        # dome falls to cos(0.2 pi) on the x faces of the cube
        assert 0.8 < row.baseline.abs_mean < 1.0
        assert row.compensated.abs_mean < 1e-8
        assert row.compensated.improvement == pytest.approx(100.0)

    def test_identity_compensator_changes_nothing(self, cube_shell_graph, noiseless_warp):
        samples = self.make_samples(cube_shell_graph, noiseless_warp)
        [row] = evaluate_compensation(samples, IdentityCompensator(), noiseless_warp)
        assert row.compensated.abs_mean == pytest.approx(row.baseline.abs_mean)
        assert row.compensated.improvement == pytest.approx(0.0)
