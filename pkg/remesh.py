"""
CAD to isometric surface graph conversion.

The triangle mesh is voxelized at high density, the surface shell is picked
out by a 3x3x3 neighborhood test, and a seeded diffusion wrap expands over the
shell from one voxel: face neighbors join immediately, diagonal neighbors are
accepted with probability 1/(4*sqrt(2)) per visit. Every surface voxel becomes
one graph vertex, so vertex spacing is near uniform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import itertools
import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components

from diff_engine import neighbor_mean_matrix
from errors import (
    ArgumentError,
    DegenerateMeshError,
    DisconnectedSurfaceError,
    FormatError,
    ResolutionLimitError,
)
from geometry_core import PointCloud, TriangleMesh
import mesh_io

logger = logging.getLogger(__name__)

MAX_GRID_CELLS = 512**3
DEFAULT_VOXEL_DIVISIONS = 200
DIAGONAL_ACCEPTANCE = 1.0 / (4.0 * math.sqrt(2.0))

NEIGHBOR_OFFSETS = np.array(
    [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)], dtype=np.int64
)
FACE_OFFSETS = NEIGHBOR_OFFSETS[np.abs(NEIGHBOR_OFFSETS).sum(axis=1) == 1]
DIAGONAL_OFFSETS = NEIGHBOR_OFFSETS[np.abs(NEIGHBOR_OFFSETS).sum(axis=1) > 1]
_AXIS_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: np.ndarray
    voxel_size: float
    occupancy: np.ndarray

    def __post_init__(self) -> None:
        if not self.voxel_size > 0:
            raise ArgumentError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "occupancy", np.asarray(self.occupancy, dtype=bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.occupancy.shape)  # type: ignore[return-value]

    def occupied_count(self) -> int:
        return int(self.occupancy.sum())

    def centers(self, coords: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(coords, dtype=np.float64) + 0.5) * self.voxel_size


@dataclass(frozen=True, eq=False)
class SurfaceShell:
    """Surface voxel coordinates (lexicographically sorted) with their grid geometry."""

    coords: np.ndarray
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    def as_set(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in row) for row in self.coords}  # type: ignore[misc]

    def centers(self) -> np.ndarray:
        return self.origin + (self.coords + 0.5) * self.voxel_size

    def mask(self) -> np.ndarray:
        volume = np.zeros(self.dims, dtype=bool)
        volume[tuple(self.coords.T)] = True
        return volume


@dataclass(frozen=True, eq=False)
class IsoGraph:
    """Isometric surface mesh as a graph: vertices, undirected edges, faces, CSR neighbors."""

    vertices: np.ndarray
    edges: np.ndarray
    faces: np.ndarray
    neighbor_offsets: np.ndarray = field(init=False)
    neighbor_indices: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        vertices = PointCloud(self.vertices).points
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = vertices.shape[0]
        for name, table in (("edge", edges), ("face", faces)):
            if table.size and (table.min() < 0 or table.max() >= n):
                raise ArgumentError(f"IsoGraph {name} index out of range")
        edges = np.sort(edges, axis=1)
        edges = np.unique(edges, axis=0) if edges.size else edges
        if edges.size and np.any(edges[:, 0] == edges[:, 1]):
            raise ArgumentError("IsoGraph edges must join distinct vertices")

        both = np.concatenate([edges, edges[:, ::-1]]) if edges.size else edges
        order = np.lexsort((both[:, 1], both[:, 0])) if both.size else np.array([], np.int64)
        both = both[order] if both.size else both.reshape(0, 2)
        counts = np.bincount(both[:, 0], minlength=n) if both.size else np.zeros(n, np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        for name, value in (
            ("vertices", vertices),
            ("edges", edges),
            ("faces", faces),
            ("neighbor_offsets", offsets),
            ("neighbor_indices", both[:, 1].astype(np.int64)),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_faces(cls, vertices: np.ndarray, faces: np.ndarray) -> IsoGraph:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        return cls(vertices, edges, faces)

    @property
    def vertex_count(self) -> int:
        return int(self.vertices.shape[0])

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_indices[self.neighbor_offsets[i] : self.neighbor_offsets[i + 1]]

    @cached_property
    def neighbor_mean(self) -> csr_matrix:
        """Row-normalized adjacency: (M x)_i is the mean of x over the neighbors of i."""
        return neighbor_mean_matrix(self.neighbor_offsets, self.neighbor_indices, self.vertex_count)

    def degrees(self) -> np.ndarray:
        return np.diff(self.neighbor_offsets)

    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]], axis=1)

    def component_count(self) -> int:
        n = self.vertex_count
        if not self.edges.size:
            return n
        adjacency = coo_matrix(
            (np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])), shape=(n, n)
        )
        count, _ = connected_components(adjacency, directed=False)
        return int(count)

    def is_connected(self) -> bool:
        return self.component_count() == 1

    def with_vertices(self, points: np.ndarray) -> IsoGraph:
        """Same topology, new vertex positions (e.g. after placement)."""
        return IsoGraph(points, self.edges, self.faces)

    def cloud(self) -> PointCloud:
        return PointCloud(self.vertices)

    def vertex_normals(self) -> np.ndarray:
        """Unit outward normals: area-weighted average of incident face normals."""
        normals = np.zeros_like(self.vertices)
        if self.faces.size:
            corners = self.vertices[self.faces]
            face_normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
            for k in range(3):
                np.add.at(normals, self.faces[:, k], face_normals)
        lengths = np.linalg.norm(normals, axis=1)
        missing = lengths < 1e-12
        if np.any(missing):
            radial = self.vertices[missing] - self.vertices.mean(axis=0)
            radial_len = np.linalg.norm(radial, axis=1, keepdims=True)
            normals[missing] = np.where(radial_len > 0, radial / np.maximum(radial_len, 1e-12), [0.0, 0.0, 1.0])
            lengths = np.linalg.norm(normals, axis=1)
        return normals / lengths[:, None]


@dataclass(frozen=True)
class IsometryReport:
    mean: float
    std: float
    cv: float


def default_voxel_size(mesh: TriangleMesh) -> float:
    lo, hi = mesh.bounds()
    diagonal = float(np.linalg.norm(hi - lo))
    if diagonal <= 0:
        raise DegenerateMeshError("Mesh bounding box has zero diagonal.")
    return diagonal / DEFAULT_VOXEL_DIVISIONS


def triangle_box_overlap(triangle: np.ndarray, center: np.ndarray, half_size: float) -> bool:
    """Separating-axis test between one triangle and one cube; touching counts as overlap."""
    v = np.asarray(triangle, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    eps = 1e-12 * max(1.0, half_size)
    for axis in range(3):
        if v[:, axis].min() > half_size + eps or v[:, axis].max() < -half_size - eps:
            return False
    edges = (v[1] - v[0], v[2] - v[1], v[0] - v[2])
    normal = np.cross(edges[0], edges[1])
    if abs(normal @ v[0]) > half_size * np.abs(normal).sum() + eps:
        return False
    for edge in edges:
        for unit in np.eye(3):
            axis_vec = np.cross(edge, unit)
            projections = v @ axis_vec
            radius = half_size * np.abs(axis_vec).sum()
            if projections.min() > radius + eps or projections.max() < -radius - eps:
                return False
    return True


def _overlap_many(triangle: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Vectorized unit-cube version of triangle_box_overlap (half size 0.5)."""
    half, eps = 0.5, 1e-12
    v = triangle[None, :, :] - centers[:, None, :]
    keep = np.all((v.min(axis=1) <= half + eps) & (v.max(axis=1) >= -half - eps), axis=1)

    edges = (triangle[1] - triangle[0], triangle[2] - triangle[1], triangle[0] - triangle[2])
    normal = np.cross(edges[0], edges[1])
    keep &= np.abs(v[:, 0, :] @ normal) <= half * np.abs(normal).sum() + eps
    for edge in edges:
        for unit in np.eye(3):
            axis_vec = np.cross(edge, unit)
            projections = v @ axis_vec
            radius = half * np.abs(axis_vec).sum()
            keep &= (projections.min(axis=1) <= radius + eps) & (projections.max(axis=1) >= -radius - eps)
    return keep


def voxelize(mesh: TriangleMesh, voxel_size: float) -> VoxelGrid:
    """
    Conservative surface voxelization: a cell is occupied iff it touches a triangle.

    The grid starts 1.5 voxels below the mesh bounding box (one pad voxel plus
    half a voxel, so axis-aligned faces sit on voxel centres) and is padded by
    at least one empty voxel on every side.
    """
    if not voxel_size > 0:
        raise ArgumentError(f"voxel_size must be positive, got {voxel_size}")
    if mesh.faces.shape[0] == 0:
        raise DegenerateMeshError("Cannot voxelize a mesh without faces.")
    lo, hi = mesh.bounds()
    origin = lo - 1.5 * voxel_size
    dims = np.floor((hi - lo) / voxel_size + 1.5).astype(np.int64) + 2
    cells = int(np.prod(dims.astype(object)))
    if cells > MAX_GRID_CELLS:
        raise ResolutionLimitError(
            f"voxel_size {voxel_size} needs {cells} cells (limit {MAX_GRID_CELLS})"
        )

    occupancy = np.zeros(tuple(dims), dtype=bool)
    grid_corners = (mesh.face_corners() - origin) / voxel_size
    for triangle in grid_corners:
        start = np.clip(np.ceil(triangle.min(axis=0)).astype(np.int64) - 1, 0, dims - 1)
        stop = np.clip(np.floor(triangle.max(axis=0)).astype(np.int64), 0, dims - 1)
        axes = [np.arange(start[a], stop[a] + 1) for a in range(3)]
        cand = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        hits = cand[_overlap_many(triangle, cand + 0.5)]
        occupancy[tuple(hits.T)] = True
    logger.info(
        f"Voxelized {mesh.faces.shape[0]} triangles into {int(occupancy.sum())} "
        f"occupied cells of grid {tuple(int(d) for d in dims)} at {voxel_size:.4g} mm"
    )
    return VoxelGrid(origin, float(voxel_size), occupancy)


def surface_voxels(grid: VoxelGrid) -> SurfaceShell:
    """Occupied voxels with an empty cell (or the grid boundary) in their 3x3x3 neighborhood."""
    if grid.occupied_count() == 0:
        raise ArgumentError("Grid has no occupied voxels.")
    interior = ndimage.binary_erosion(
        grid.occupancy, structure=np.ones((3, 3, 3), dtype=bool), border_value=0
    )
    coords = np.argwhere(grid.occupancy & ~interior).astype(np.int64)
    return SurfaceShell(coords, grid.origin.copy(), grid.voxel_size, grid.dims)


def _neighbor_table(shell: SurfaceShell, offsets: np.ndarray) -> np.ndarray:
    """Row i, column k: index of the surface voxel at coords[i] + offsets[k], or -1."""
    lookup = np.full(shell.dims, -1, dtype=np.int64)
    lookup[tuple(shell.coords.T)] = np.arange(len(shell))
    dims = np.asarray(shell.dims)
    table = np.full((len(shell), len(offsets)), -1, dtype=np.int64)
    for k, offset in enumerate(offsets):
        target = shell.coords + offset
        inside = np.all((target >= 0) & (target < dims), axis=1)
        table[inside, k] = lookup[tuple(target[inside].T)]
    return table


def _orient_faces(faces: np.ndarray, shell: SurfaceShell) -> np.ndarray:
    """Flip faces whose normal points into the filled solid bounded by the shell."""
    if not faces.size:
        return faces
    solid = ndimage.binary_fill_holes(shell.mask())
    dims = np.asarray(shell.dims)
    corners = shell.coords[faces].astype(np.float64) + 0.5
    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    centroids = corners.mean(axis=1)

    def filled(points: np.ndarray) -> np.ndarray:
        cells = np.floor(points).astype(np.int64)
        inside = np.all((cells >= 0) & (cells < dims), axis=1)
        out = np.zeros(len(points), dtype=np.int64)
        out[inside] = solid[tuple(cells[inside].T)]
        return out

    vote = filled(centroids - 0.75 * normals) - filled(centroids + 0.75 * normals)
    fallback = np.einsum("ij,ij->i", normals, centroids - (shell.coords + 0.5).mean(axis=0))
    flip = (vote < 0) | ((vote == 0) & (fallback < 0))
    if np.any(vote == 0):
        logger.debug(f"{int((vote == 0).sum())} faces oriented by the centroid fallback")
    oriented = faces.copy()
    oriented[flip] = oriented[flip][:, [0, 2, 1]]
    return oriented


def _canonical_faces(faces: np.ndarray) -> np.ndarray:
    if not faces.size:
        return faces.reshape(0, 3)
    shift = np.argmin(faces, axis=1)
    rolled = np.stack([np.roll(face, -s) for face, s in zip(faces, shift)])
    order = np.lexsort((rolled[:, 2], rolled[:, 1], rolled[:, 0]))
    return rolled[order]


def diffusion_wrap(surface: SurfaceShell, seed: int) -> IsoGraph:
    """
    Wrap the surface shell into an IsoGraph.

    Breadth-wise expansion from a seeded start voxel; face-adjacent voxels are
    admitted on first contact, diagonal voxels with probability
    DIAGONAL_ACCEPTANCE and revisited on later passes until accepted. Vertices
    are the voxel centres, which lie in the shell by construction. Faces come
    from every axis-aligned quad of wrap vertices, split along the shorter
    diagonal, plus one closing triangle for any wrap link left without a face.
    Links no triangle can close are dropped, so every edge lies on a face.
    """
    count = len(surface)
    if count == 0:
        raise ArgumentError("Surface voxel set is empty.")

    face_table = _neighbor_table(surface, FACE_OFFSETS)
    diag_table = _neighbor_table(surface, DIAGONAL_OFFSETS)
    all_table = np.concatenate([face_table, diag_table], axis=1)
    rows = np.repeat(np.arange(count), all_table.shape[1])
    cols = all_table.reshape(-1)
    valid = cols >= 0
    adjacency = coo_matrix(
        (np.ones(int(valid.sum())), (rows[valid], cols[valid])), shape=(count, count)
    )
    components, _ = connected_components(adjacency, directed=False)
    if components != 1:
        raise DisconnectedSurfaceError(
            f"Surface splits into {components} components; split them before wrapping"
        )

    rng = np.random.default_rng(seed)
    start = int(rng.permutation(count)[0])
    visited = np.zeros(count, dtype=bool)
    visited[start] = True
    links: set[tuple[int, int]] = set()
    frontier = [start]
    passes = 0
    while frontier:
        passes += 1
        next_frontier: list[int] = []
        retry: list[int] = []
        for v in frontier:
            for u in face_table[v]:
                if u >= 0 and not visited[u]:
                    visited[u] = True
                    next_frontier.append(int(u))
            pending = False
            for u in diag_table[v]:
                if u < 0 or visited[u]:
                    continue
                if rng.random() < DIAGONAL_ACCEPTANCE:
                    visited[u] = True
                    links.add((min(v, int(u)), max(v, int(u))))
                    next_frontier.append(int(u))
                else:
                    pending = True
            if pending:
                retry.append(v)
        frontier = next_frontier + retry
    logger.debug(f"Diffusion wrap covered {count} voxels in {passes} passes")

    for k in range(len(FACE_OFFSETS)):
        partners = face_table[:, k]
        for v in np.flatnonzero(partners >= 0):
            u = int(partners[v])
            links.add((min(int(v), u), max(int(v), u)))

    centers = surface.centers()
    lookup = {tuple(int(c) for c in row): i for i, row in enumerate(surface.coords)}
    edges = set(links)
    faces: list[tuple[int, int, int]] = []
    for i, base in enumerate(surface.coords):
        for a, b in _AXIS_PAIRS:
            ea = np.zeros(3, dtype=np.int64)
            eb = np.zeros(3, dtype=np.int64)
            ea[a] = 1
            eb[b] = 1
            ia = lookup.get(tuple(int(c) for c in base + ea))
            ib = lookup.get(tuple(int(c) for c in base + eb))
            iab = lookup.get(tuple(int(c) for c in base + ea + eb))
            if ia is None or ib is None or iab is None:
                continue
            main = np.linalg.norm(centers[iab] - centers[i])
            anti = np.linalg.norm(centers[ib] - centers[ia])
            if main <= anti:
                faces += [(i, ia, iab), (i, iab, ib)]
                edges.add((min(i, iab), max(i, iab)))
            else:
                faces += [(i, ia, ib), (ia, iab, ib)]
                edges.add((min(ia, ib), max(ia, ib)))

    covered = set()
    for f in faces:
        for p, q in ((f[0], f[1]), (f[1], f[2]), (f[0], f[2])):
            covered.add((min(p, q), max(p, q)))
    neighbor_sets = [set(int(u) for u in row if u >= 0) for row in all_table]
    orphans = 0
    for v, u in sorted(edges - covered):
        common = sorted((neighbor_sets[v] & neighbor_sets[u]) - {v, u})
        if not common:
            orphans += 1
            continue
        w = common[0]
        faces.append((v, w, u))
        edges.add((min(v, w), max(v, w)))
        edges.add((min(w, u), max(w, u)))
    if orphans:
        logger.info(f"Dropped {orphans} wrap links with no closing triangle")

    face_array = np.array(faces, dtype=np.int64).reshape(-1, 3)
    face_array = _canonical_faces(_orient_faces(face_array, surface))
    graph = IsoGraph.from_faces(centers, face_array)
    isolated = np.flatnonzero(graph.degrees() == 0)
    if isolated.size:
        raise DisconnectedSurfaceError(f"{isolated.size} surface voxels lie on no wrap triangle")
    if not graph.is_connected():
        raise DisconnectedSurfaceError(
            f"Wrap triangles split into {graph.component_count()} components"
        )
    logger.info(
        f"Wrapped {count} surface voxels into {len(graph.edges)} edges and {len(graph.faces)} faces"
    )
    return graph


def isometry_report(graph: IsoGraph) -> IsometryReport:
    """Mean, population std and coefficient of variation of edge lengths."""
    if not graph.edges.size:
        raise ArgumentError("Graph has no edges.")
    lengths = graph.edge_lengths()
    mean = float(lengths.mean())
    std = float(lengths.std())
    return IsometryReport(mean=mean, std=std, cv=std / mean)


def remesh(mesh: TriangleMesh, voxel_size: Optional[float] = None, seed: int = 0) -> IsoGraph:
    """Full CAD -> IsoGraph conversion."""
    size = voxel_size if voxel_size is not None else default_voxel_size(mesh)
    return diffusion_wrap(surface_voxels(voxelize(mesh, size)), seed)


def write_isograph(graph: IsoGraph, path: str | Path) -> Path:
    """PLY with vertices and faces plus a `.edges` sidecar; returns the sidecar path."""
    path = Path(path)
    mesh_io.write_ply(path, graph.vertices, faces=graph.faces)
    sidecar = path.with_suffix(".edges")
    mesh_io.write_edge_list(graph.edges, sidecar)
    return sidecar


def read_isograph(path: str | Path) -> IsoGraph:
    path = Path(path)
    data = mesh_io.read_ply(path)
    faces = data.faces if data.faces is not None else np.zeros((0, 3), dtype=np.int64)
    sidecar = path.with_suffix(".edges")
    if sidecar.exists():
        return IsoGraph(data.points, mesh_io.read_edge_list(sidecar), faces)
    if not faces.size:
        raise FormatError(f"{path}: graph PLY has no faces and no .edges sidecar")
    return IsoGraph.from_faces(data.points, faces)
