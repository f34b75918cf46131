"""Deviation metrics, heatmap export and compensation evaluation against the oracle."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
import logging
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from dataset import Sample, part_seed
from errors import AlignmentError, ArgumentError, FormatError
from geometry_core import PointCloud
import mesh_io
from print_oracle import WarpSpec, simulate_print
from registration import correspond
from remesh import IsoGraph

logger = logging.getLogger(__name__)

REPORT_DECIMALS = 4
RANGE_COMMENT = "deviation_range"
CORRESPONDENCE_MODES = ("nearest", "index")


@dataclass(frozen=True)
class DeviationReport:
    min: float
    max: float
    std: float
    abs_mean: float
    improvement: Optional[float] = None

    def to_dict(self) -> dict[str, Optional[float]]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SignedDeviationField:
    """Per-vertex deviation in mm, positive along the outward normal."""

    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def max_abs(self) -> float:
        return float(np.abs(self.values).max()) if len(self) else 0.0


class Compensator(Protocol):
    def forward(self, cloud: PointCloud, graph: IsoGraph) -> PointCloud: ...


@dataclass(frozen=True)
class CompensationRow:
    part_id: str
    baseline: DeviationReport
    compensated: DeviationReport


def improvement(baseline_abs_mean: float, abs_mean: float) -> float:
    """Percentage reduction of abs-mean deviation relative to the baseline."""
    if not baseline_abs_mean > 0:
        raise ArgumentError(f"Baseline abs mean must be positive, got {baseline_abs_mean}")
    return (baseline_abs_mean - abs_mean) / baseline_abs_mean * 100.0


def summarize(field: SignedDeviationField, baseline: Optional[DeviationReport] = None) -> DeviationReport:
    values = field.values
    if values.size == 0:
        raise ArgumentError("Cannot summarize an empty deviation field.")
    abs_mean = float(np.abs(values).mean())
    return DeviationReport(
        min=float(values.min()),
        max=float(values.max()),
        std=float(values.std()),
        abs_mean=abs_mean,
        improvement=None if baseline is None else improvement(baseline.abs_mean, abs_mean),
    )


def signed_deviation(
    cad: PointCloud, scan: PointCloud, graph: IsoGraph, mode: str = "nearest"
) -> SignedDeviationField:
    """
    |d_i| signed by d_i . n_i, where n_i is the outward vertex normal of the
    graph placed at the CAD positions. sign(0) is +1.

    mode="nearest" matches each CAD point to its nearest scan point;
    mode="index" pairs row i with row i.
    """
    if mode not in CORRESPONDENCE_MODES:
        raise ArgumentError(f"Unknown correspondence mode '{mode}'")
    if graph.vertex_count != len(cad):
        raise AlignmentError(f"Graph has {graph.vertex_count} vertices, CAD has {len(cad)} points")
    if mode == "index":
        if len(scan) != len(cad):
            raise AlignmentError(f"Index mode needs equal counts, got {len(cad)} and {len(scan)}")
        displacements = scan.points - cad.points
    else:
        displacements = correspond(cad, scan).displacements
    normals = graph.with_vertices(cad.points).vertex_normals()
    projection = np.einsum("ij,ij->i", displacements, normals)
    sign = np.where(projection >= 0, 1.0, -1.0)
    return SignedDeviationField(sign * np.linalg.norm(displacements, axis=1))


def deviation_report(
    cad: PointCloud,
    scan: PointCloud,
    graph: IsoGraph,
    baseline: Optional[DeviationReport] = None,
    mode: str = "nearest",
) -> tuple[DeviationReport, SignedDeviationField]:
    field = signed_deviation(cad, scan, graph, mode)
    return summarize(field, baseline), field


def prediction_error(predicted: PointCloud, scan: PointCloud) -> float:
    """Mean distance between index-aligned predicted and printed points."""
    if len(predicted) != len(scan):
        raise AlignmentError(f"{len(predicted)} predicted points vs {len(scan)} printed points")
    return float(np.linalg.norm(predicted.points - scan.points, axis=1).mean())


def evaluate_compensation(
    samples: Sequence[Sample], compensator: Compensator, warp: WarpSpec
) -> list[CompensationRow]:
    """
    Print each part through the oracle as designed and as compensated, and
    compare both prints with the design vertex by vertex.
    """
    rows = []
    for sample in samples:
        noise_seed = part_seed(warp.seed, sample.part_id)
        baseline_print = simulate_print(sample.cad, warp, seed=noise_seed)
        compensated_cad = compensator.forward(sample.cad, sample.graph)
        compensated_print = simulate_print(compensated_cad, warp, seed=noise_seed)
        baseline, _ = deviation_report(sample.cad, baseline_print, sample.graph, mode="index")
        compensated, _ = deviation_report(
            sample.cad, compensated_print, sample.graph, baseline=baseline, mode="index"
        )
        logger.info(
            f"{sample.part_id}: abs mean {baseline.abs_mean:.4f} -> {compensated.abs_mean:.4f} mm "
            f"({compensated.improvement:.1f}%)"
        )
        rows.append(CompensationRow(sample.part_id, baseline, compensated))
    return rows


def export_heatmap(field: SignedDeviationField, cloud: PointCloud, path: str | Path) -> None:
    """ASCII PLY with a `deviation` vertex scalar and the symmetric colour range in a comment."""
    if len(field) != len(cloud):
        raise AlignmentError(f"Field has {len(field)} values for {len(cloud)} points")
    c = field.max_abs
    mesh_io.write_ply(
        path,
        cloud.points,
        scalars={"deviation": field.values},
        comments=["units mm", f"{RANGE_COMMENT} {-c if c else 0.0:.9g} {c:.9g}"],
    )


def read_heatmap(path: str | Path) -> tuple[PointCloud, SignedDeviationField, tuple[float, float]]:
    data = mesh_io.read_ply(path)
    if "deviation" not in data.scalars:
        raise FormatError(f"{path}: no 'deviation' vertex property")
    value_range = (0.0, 0.0)
    for comment in data.comments:
        parts = comment.split()
        if parts and parts[0] == RANGE_COMMENT and len(parts) == 3:
            value_range = (float(parts[1]), float(parts[2]))
    return data.cloud(), SignedDeviationField(data.scalars["deviation"]), value_range


def write_report_csv(rows: Sequence[tuple[str, DeviationReport]], path: str | Path) -> None:
    def fmt(value: Optional[float]) -> str:
        return "" if value is None else f"{value:.{REPORT_DECIMALS}f}"

    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["part", "min", "max", "std", "abs_mean", "improvement"])
        for part, report in rows:
            writer.writerow(
                [part, fmt(report.min), fmt(report.max), fmt(report.std), fmt(report.abs_mean), fmt(report.improvement)]
            )
