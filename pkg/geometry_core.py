"""
Core 3D types shared by the whole pipeline: point clouds, triangle meshes,
rigid placements, the build chamber, nearest-neighbor indexing and uniform
surface resampling.

Chamber frame: right-handed, z up (build direction), origin at the chamber
minimum corner, millimetres throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from errors import (
    ArgumentError,
    DegenerateMeshError,
    EmptyCloudError,
    EmptyIndexError,
    InvalidPlacementError,
    ShapeError,
)

logger = logging.getLogger(__name__)

DEFAULT_RESAMPLE_POINTS = 2048
RELAXATION_ITERATIONS = 5
ORTHONORMAL_TOLERANCE = 1e-9
DEFAULT_CHAMBER_MIN = (0.0, 0.0, 0.0)
DEFAULT_CHAMBER_MAX = (380.0, 284.0, 380.0)


def _readonly(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


def _as_points(values: object, what: str = "points") -> np.ndarray:
    points = np.array(values, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"{what} must have shape (n, 3), got {points.shape}")
    return points


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points in mm; row i keeps its identity across pipeline stages."""

    points: np.ndarray

    def __post_init__(self) -> None:
        points = _as_points(self.points)
        if points.shape[0] < 1:
            raise EmptyCloudError("A point cloud needs at least one point.")
        if not np.all(np.isfinite(points)):
            raise ArgumentError("Point cloud contains non-finite coordinates.")
        object.__setattr__(self, "points", _readonly(points))

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def __len__(self) -> int:
        return self.count

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    def translated(self, offset: Sequence[float]) -> PointCloud:
        return PointCloud(self.points + np.asarray(offset, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Raw CAD surface: vertices in mm and vertex-index triples."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        vertices = _as_points(self.vertices, "vertices")
        if vertices.shape[0] < 1:
            raise EmptyCloudError("A mesh needs at least one vertex.")
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size:
            if faces.min() < 0 or faces.max() >= vertices.shape[0]:
                raise ArgumentError("Face index out of range for the vertex list.")
            if np.any(
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            ):
                raise ArgumentError("Degenerate face: indices must be distinct.")
        object.__setattr__(self, "vertices", _readonly(vertices))
        object.__setattr__(self, "faces", _readonly(faces))

    def face_corners(self) -> np.ndarray:
        """Per-face corner coordinates, shape (m, 3, 3)."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        corners = self.face_corners()
        cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def total_area(self) -> float:
        return float(self.face_areas().sum())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, placement: Placement) -> TriangleMesh:
        return TriangleMesh(placement.apply(self.vertices), self.faces)


@dataclass(frozen=True, eq=False)
class Placement:
    """Rigid pose of a part in the chamber: p -> R p + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise InvalidPlacementError(
                f"Expected a 3x3 rotation and 3-vector translation, got "
                f"{rotation.shape} and {translation.shape}"
            )
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise InvalidPlacementError("Placement contains non-finite values.")
        gram_error = np.abs(rotation.T @ rotation - np.eye(3)).max()
        det_error = abs(np.linalg.det(rotation) - 1.0)
        if gram_error > ORTHONORMAL_TOLERANCE or det_error > ORTHONORMAL_TOLERANCE:
            raise InvalidPlacementError(
                f"Rotation is not a proper orthonormal matrix "
                f"(|R^T R - I| = {gram_error:.3e}, |det - 1| = {det_error:.3e})"
            )
        object.__setattr__(self, "rotation", _readonly(rotation))
        object.__setattr__(self, "translation", _readonly(translation))

    @classmethod
    def identity(cls) -> Placement:
        return cls()

    @classmethod
    def from_axis_angle(
        cls,
        axis: Sequence[float],
        angle_deg: float,
        translation: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> Placement:
        axis_vec = np.asarray(axis, dtype=np.float64)
        norm = np.linalg.norm(axis_vec)
        if norm == 0.0:
            raise ArgumentError("Rotation axis must be nonzero.")
        kx, ky, kz = axis_vec / norm
        cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
        theta = math.radians(angle_deg)
        rotation = (
            np.eye(3) + math.sin(theta) * cross + (1.0 - math.cos(theta)) * cross @ cross
        )
        return cls(rotation, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_euler(
        cls,
        rx: float = 0.0,
        ry: float = 0.0,
        rz: float = 0.0,
        translation: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> Placement:
        """Extrinsic rotations in degrees, applied about x, then y, then z."""
        rot_x = cls.from_axis_angle((1.0, 0.0, 0.0), rx).rotation
        rot_y = cls.from_axis_angle((0.0, 1.0, 0.0), ry).rotation
        rot_z = cls.from_axis_angle((0.0, 0.0, 1.0), rz).rotation
        return cls(rot_z @ rot_y @ rot_x, np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> Placement:
        return Placement(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, first: Placement) -> Placement:
        """Placement equivalent to applying `first`, then `self`."""
        return Placement(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
        )

    def rotation_angle_deg(self) -> float:
        cos_theta = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return math.degrees(math.acos(cos_theta))


@dataclass(frozen=True, eq=False)
class ChamberSpec:
    """Axis-aligned build chamber box in mm."""

    min_corner: np.ndarray = field(
        default_factory=lambda: np.array(DEFAULT_CHAMBER_MIN)
    )
    max_corner: np.ndarray = field(
        default_factory=lambda: np.array(DEFAULT_CHAMBER_MAX)
    )

    def __post_init__(self) -> None:
        lo = np.array(self.min_corner, dtype=np.float64).reshape(-1)
        hi = np.array(self.max_corner, dtype=np.float64).reshape(-1)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ArgumentError("Chamber corners must be 3-vectors.")
        if not np.all(lo < hi):
            raise ArgumentError(f"Chamber min {lo} must be below max {hi} on every axis.")
        object.__setattr__(self, "min_corner", _readonly(lo))
        object.__setattr__(self, "max_corner", _readonly(hi))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def half_diagonal(self) -> float:
        return float(np.linalg.norm(0.5 * self.extent))

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all(
            (pts >= self.min_corner - tol) & (pts <= self.max_corner + tol), axis=1
        )

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map chamber coordinates onto the unit cube."""
        return (np.asarray(points, dtype=np.float64) - self.min_corner) / self.extent


class SpatialIndex:
    """
    Nearest-neighbor index over a fixed cloud.

    Answers match an exhaustive scan exactly, including the tie rule:
    among equidistant points the lowest index wins.
    """

    _TIE_CANDIDATES = 4

    def __init__(self, cloud: PointCloud | np.ndarray):
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
        points = np.array(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise EmptyIndexError("Cannot build a spatial index over an empty cloud.")
        self._points = _readonly(points)
        self._tree = cKDTree(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def count(self) -> int:
        return int(self._points.shape[0])

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (indices, distances) of the nearest point for every query row."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        rows = np.arange(q.shape[0])
        k = min(self.count, self._TIE_CANDIDATES)
        _, candidates = self._tree.query(q, k=k)
        candidates = np.asarray(candidates, dtype=np.int64).reshape(q.shape[0], k)
        distances = np.linalg.norm(self._points[candidates] - q[:, None, :], axis=2)
        order = np.lexsort((candidates, distances), axis=-1)
        best_col = order[:, 0]
        best_idx = candidates[rows, best_col]
        best_dist = distances[rows, best_col]

        if k < self.count:
            # every candidate tied: more equidistant points may lie beyond k
            saturated = distances.max(axis=1) <= best_dist * (1.0 + 1e-12) + 1e-15
            for row in np.flatnonzero(saturated):
                radius = best_dist[row] * (1.0 + 1e-9) + 1e-12
                pool = np.array(
                    sorted(self._tree.query_ball_point(q[row], r=radius)), dtype=np.int64
                )
                pool_dist = np.linalg.norm(self._points[pool] - q[row], axis=1)
                pick = int(np.argmin(pool_dist))
                best_idx[row] = pool[pick]
                best_dist[row] = pool_dist[pick]
        return best_idx, best_dist


def apply_placement(cloud: PointCloud, placement: Placement) -> PointCloud:
    """Place a cloud in the chamber: point i becomes R p_i + t, order preserved."""
    return PointCloud(placement.apply(cloud.points))


def nearest_neighbor(index: SpatialIndex, query: Sequence[float]) -> tuple[int, float]:
    indices, distances = index.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return int(indices[0]), float(distances[0])


def _allocate_counts(areas: np.ndarray, k: int) -> np.ndarray:
    """Area-proportional integer counts summing to k (largest remainder)."""
    quotas = k * areas / areas.sum()
    counts = np.floor(quotas).astype(np.int64)
    remainder = k - int(counts.sum())
    if remainder > 0:
        fractions = quotas - counts
        order = np.argsort(-fractions, kind="stable")
        counts[order[:remainder]] += 1
    return counts


def _barycentric(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points projected onto their own triangles."""
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    v0, v1, v2 = b - a, c - a, points - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    denom = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    return np.stack([1.0 - v - w, v, w], axis=1)


def _from_barycentric(bary: np.ndarray, corners: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ijk->ik", bary, corners)


def _relax(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """One repulsion pass toward blue-noise spacing; points stay on their face."""
    count = points.shape[0]
    neighbors = min(7, count)
    if neighbors < 2:
        return points
    distances, indices = cKDTree(points).query(points, k=neighbors)
    spacing = float(distances[:, 1].mean())
    if spacing <= 0.0:
        return points
    radius = 2.0 * spacing
    offsets = points[:, None, :] - points[indices[:, 1:]]
    dist = distances[:, 1:, None]
    weight = np.clip(radius - dist, 0.0, None) / np.maximum(dist, 1e-12)
    push = 0.25 * (offsets * weight).sum(axis=1) / (neighbors - 1)
    bary = _barycentric(points + push, corners)
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    return _from_barycentric(bary, corners)


def resample_uniform(mesh: TriangleMesh, k: int, seed: int) -> PointCloud:
    """
    Sample exactly k points on the mesh surface.

    Faces receive area-proportional counts, points are drawn uniformly per face
    and then relaxed for RELAXATION_ITERATIONS passes while staying on their
    triangle. Deterministic per seed.
    """
    if k < 1:
        raise ArgumentError(f"Resample count must be >= 1, got {k}")
    if mesh.faces.shape[0] == 0:
        raise DegenerateMeshError("Mesh has no faces to sample.")
    areas = mesh.face_areas()
    if not areas.sum() > 0.0:
        raise DegenerateMeshError("Mesh has zero surface area.")

    counts = _allocate_counts(areas, k)
    face_ids = np.repeat(np.arange(areas.shape[0]), counts)
    corners = mesh.face_corners()[face_ids]

    rng = np.random.default_rng(seed)
    r1 = np.sqrt(rng.random(k))
    r2 = rng.random(k)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    points = _from_barycentric(bary, corners)
    for _ in range(RELAXATION_ITERATIONS):
        points = _relax(points, corners)
    logger.debug(f"Resampled {k} points over {int((counts > 0).sum())} faces")
    return PointCloud(points)
