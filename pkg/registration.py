"""
Rigid scan-to-CAD registration and nearest-neighbor displacement correspondence.

Coarse alignment matches centroids and principal axes; trimmed ICP then
refines every coarse candidate and the lowest-RMS fit wins.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
import logging
import math
from pathlib import Path

import numpy as np

from errors import DegenerateGeometryError, EmptyCloudError
from geometry_core import Placement, PointCloud, SpatialIndex

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 100
DEFAULT_TOLERANCE = 1e-6
TRIM_FRACTION = 0.05
COPLANAR_RATIO = 1e-9
_PROPER_SIGNS = ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1))


@dataclass(frozen=True)
class RigidFit:
    """Transform mapping the scan into the CAD frame, with its trimmed RMS history."""

    placement: Placement
    rms: float
    iterations: int
    rms_history: tuple[float, ...] = ()
    converged: bool = True

    def apply(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(self.placement.apply(cloud.points))


@dataclass(frozen=True, eq=False)
class Correspondence:
    pairs: np.ndarray
    displacements: np.ndarray

    @property
    def cad_indices(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def scan_indices(self) -> np.ndarray:
        return self.pairs[:, 1]

    def __len__(self) -> int:
        return int(self.pairs.shape[0])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["cad_index", "scan_index", "dx", "dy", "dz"])
            for (cad_i, scan_i), (dx, dy, dz) in zip(self.pairs, self.displacements):
                writer.writerow([int(cad_i), int(scan_i), repr(float(dx)), repr(float(dy)), repr(float(dz))])


def _check_geometry(points: np.ndarray, what: str) -> None:
    if points.shape[0] < 4:
        raise DegenerateGeometryError(f"{what} needs at least 4 points, got {points.shape[0]}")
    singular = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if singular[0] == 0.0 or singular[2] <= COPLANAR_RATIO * singular[0]:
        raise DegenerateGeometryError(f"{what} is coplanar or collinear")


def principal_axes(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(centroid, R) with the rows of R the principal directions, det(R) = +1."""
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    axes = vt.copy()
    if np.linalg.det(axes) < 0:
        axes[2] *= -1
    return centroid, axes


def kabsch(source: np.ndarray, target: np.ndarray) -> Placement:
    """Least-squares rigid map of source rows onto target rows (reflection corrected)."""
    src_c = source.mean(axis=0)
    tgt_c = target.mean(axis=0)
    h = (source - src_c).T @ (target - tgt_c)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Placement(rotation, tgt_c - rotation @ src_c)


def coarse_alignments(scan: PointCloud, cad: PointCloud) -> list[Placement]:
    """Centroid-only candidate first, then the four proper principal-axis matches."""
    scan_c, scan_axes = principal_axes(scan.points)
    cad_c, cad_axes = principal_axes(cad.points)
    candidates = [Placement(np.eye(3), cad_c - scan_c)]
    for signs in _PROPER_SIGNS:
        rotation = cad_axes.T @ np.diag(signs) @ scan_axes
        candidates.append(Placement(rotation, cad_c - rotation @ scan_c))
    return candidates


def _trimmed_rms(
    scan_pts: np.ndarray, index: SpatialIndex, placement: Placement
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    moved = placement.apply(scan_pts)
    matches, distances = index.query(moved)
    keep_count = max(3, int(math.ceil((1.0 - TRIM_FRACTION) * len(distances))))
    keep = np.argsort(distances, kind="stable")[:keep_count]
    rms = float(np.sqrt(np.mean(distances[keep] ** 2)))
    return rms, moved, matches, keep


def _refine(
    scan_pts: np.ndarray,
    index: SpatialIndex,
    initial: Placement,
    max_iter: int,
    tol: float,
) -> RigidFit:
    current = initial
    rms, moved, matches, keep = _trimmed_rms(scan_pts, index, current)
    history = [rms]
    iterations = 0
    converged = False
    while iterations < max_iter:
        step = kabsch(moved[keep], index.points[matches[keep]])
        current = step.compose(current)
        rms, moved, matches, keep = _trimmed_rms(scan_pts, index, current)
        iterations += 1
        history.append(rms)
        logger.debug(f"ICP iteration {iterations}: rms {rms:.6g} mm")
        if abs(history[-2] - rms) < tol:
            converged = True
            break
    return RigidFit(current, rms, iterations, tuple(history), converged)


def icp_align(
    scan: PointCloud,
    cad: PointCloud,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOLERANCE,
) -> RigidFit:
    """
    Register `scan` onto `cad`.

    Every coarse candidate is refined by trimmed ICP (worst 5% of matches
    dropped each iteration); the fit with the lowest final RMS is returned.
    Hitting max_iter is not an error: the fit comes back with converged=False.
    """
    _check_geometry(scan.points, "Scan cloud")
    _check_geometry(cad.points, "CAD cloud")
    index = SpatialIndex(cad)
    logger.info(f"Aligning {len(scan)} scan points to {len(cad)} CAD points...")

    best: RigidFit | None = None
    for candidate in coarse_alignments(scan, cad):
        fit = _refine(scan.points, index, candidate, max_iter, tol)
        if best is None or fit.rms < best.rms:
            best = fit
    assert best is not None
    if not best.converged:
        logger.warning(f"ICP did not converge within {max_iter} iterations (rms {best.rms:.6g} mm)")
    logger.info(f"Alignment complete: rms {best.rms:.6g} mm after {best.iterations} iterations.")
    return best


def correspond(cad: PointCloud, scan: PointCloud) -> Correspondence:
    """Nearest scan point and displacement for every CAD point (many-to-one allowed)."""
    if len(scan) == 0:
        raise EmptyCloudError("Scan cloud is empty.")
    if len(scan) < len(cad):
        logger.warning(
            f"Scan has fewer points ({len(scan)}) than the CAD cloud ({len(cad)}); "
            "displacements assume a dense scan"
        )
    matches, _ = SpatialIndex(scan).query(cad.points)
    pairs = np.stack([np.arange(len(cad), dtype=np.int64), matches], axis=1)
    displacements = scan.points[matches] - cad.points
    return Correspondence(pairs, displacements)
