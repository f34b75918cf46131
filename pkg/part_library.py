"""Synthetic CAD parts, built in their own part frame (bounding box centred on the origin)."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from errors import ArgumentError
from geometry_core import TriangleMesh

BAR_SIZE = (100.0, 10.0, 5.0)

# corner index = i + 2j + 4k for the unit box corner (i, j, k)
_BOX_FACES = np.array(
    [
        [0, 2, 1], [1, 2, 3],  # z-
        [4, 5, 6], [5, 7, 6],  # z+
        [0, 1, 5], [0, 5, 4],  # y-
        [2, 6, 7], [2, 7, 3],  # y+
        [0, 4, 6], [0, 6, 2],  # x-
        [1, 3, 7], [1, 7, 5],  # x+
    ],
    dtype=np.int64,
)


def box_mesh(
    size: Sequence[float], center: Sequence[float] = (0.0, 0.0, 0.0)
) -> TriangleMesh:
    """Closed axis-aligned box with outward-facing triangles."""
    extent = np.asarray(size, dtype=np.float64)
    if extent.shape != (3,) or np.any(extent <= 0):
        raise ArgumentError(f"Box size must be three positive lengths, got {size}")
    bits = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=np.float64)
    vertices = (bits - 0.5) * extent + np.asarray(center, dtype=np.float64)
    return TriangleMesh(vertices, _BOX_FACES)


def cube_mesh(edge: float = 1.0, center: Sequence[float] = (0.0, 0.0, 0.0)) -> TriangleMesh:
    return box_mesh((edge, edge, edge), center)


def bar_mesh(size: Sequence[float] = BAR_SIZE) -> TriangleMesh:
    """The nesting study bar: long axis along x."""
    return box_mesh(size)


def egg_plate_mesh(
    length: float = 120.0,
    width: float = 50.0,
    thickness: float = 3.0,
    cup_depth: float = 8.0,
    cups: tuple[int, int] = (5, 2),
    resolution: float = 2.0,
) -> TriangleMesh:
    """
    Closed heightfield slab with a grid of raised cups, standing in for a
    molded-fiber egg plate. Flat bottom, cup domes on top, vertical walls.
    """
    if min(length, width, thickness, resolution) <= 0 or cup_depth < 0:
        raise ArgumentError("Egg plate dimensions must be positive.")
    nx = max(2, int(math.ceil(length / resolution)))
    ny = max(2, int(math.ceil(width / resolution)))
    xs = np.linspace(-length / 2, length / 2, nx + 1)
    ys = np.linspace(-width / 2, width / 2, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")

    pitch_x, pitch_y = length / cups[0], width / cups[1]
    radius = 0.45 * min(pitch_x, pitch_y)
    height = np.full(gx.shape, thickness)
    for ci in range(cups[0]):
        for cj in range(cups[1]):
            cx = -length / 2 + (ci + 0.5) * pitch_x
            cy = -width / 2 + (cj + 0.5) * pitch_y
            rho = np.hypot(gx - cx, gy - cy)
            dome = np.where(rho < radius, np.cos(0.5 * math.pi * rho / radius) ** 2, 0.0)
            height += cup_depth * dome

    def vid(i: int, j: int, layer: int) -> int:
        return layer * (nx + 1) * (ny + 1) + i * (ny + 1) + j

    top = np.stack([gx, gy, height], axis=-1).reshape(-1, 3)
    bottom = np.stack([gx, gy, np.zeros_like(gx)], axis=-1).reshape(-1, 3)
    vertices = np.vstack([top, bottom])

    faces = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j, 0), vid(i + 1, j, 0), vid(i + 1, j + 1, 0), vid(i, j + 1, 0)
            faces += [[a, b, c], [a, c, d]]
            a, b, c, d = vid(i, j, 1), vid(i + 1, j, 1), vid(i + 1, j + 1, 1), vid(i, j + 1, 1)
            faces += [[a, c, b], [a, d, c]]

    # boundary ring, counter-clockwise seen from +z
    ring = (
        [(i, 0) for i in range(nx)]
        + [(nx, j) for j in range(ny)]
        + [(i, ny) for i in range(nx, 0, -1)]
        + [(0, j) for j in range(ny, 0, -1)]
    )
    for (pi, pj), (qi, qj) in zip(ring, ring[1:] + ring[:1]):
        tp, tq = vid(pi, pj, 0), vid(qi, qj, 0)
        bp, bq = vid(pi, pj, 1), vid(qi, qj, 1)
        faces += [[tp, bp, bq], [tp, bq, tq]]

    vertices[:, 2] -= 0.5 * (vertices[:, 2].min() + vertices[:, 2].max())
    return TriangleMesh(vertices, np.array(faces, dtype=np.int64))
