"""ASCII OBJ / PLY readers and writers plus the edge-list sidecar format."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from errors import FormatError
from geometry_core import PointCloud, TriangleMesh

logger = logging.getLogger(__name__)

COORD_FORMAT = "{:.17g}"
SCALAR_FORMAT = "{:.9g}"


@dataclass
class PlyData:
    points: np.ndarray
    faces: Optional[np.ndarray] = None
    scalars: dict[str, np.ndarray] = field(default_factory=dict)
    comments: list[str] = field(default_factory=list)

    def cloud(self) -> PointCloud:
        return PointCloud(self.points)


def read_obj(path: str | Path) -> TriangleMesh:
    """Read `v` and `f` records; polygon faces are fan-triangulated."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(value) for value in parts[1:4]])
                elif parts[0] == "f":
                    # "f 1/2/3 4//6 ..." -> vertex index before the first slash
                    ring = [int(token.split("/")[0]) for token in parts[1:]]
                    ring = [idx - 1 if idx > 0 else len(vertices) + idx for idx in ring]
                    for i in range(1, len(ring) - 1):
                        faces.append([ring[0], ring[i], ring[i + 1]])
            except ValueError as e:
                raise FormatError(f"{path}:{line_no}: malformed OBJ record: {e}") from e
    if not vertices:
        raise FormatError(f"{path}: OBJ file has no vertices")
    logger.debug(f"Read {len(vertices)} vertices and {len(faces)} faces from {path}")
    return TriangleMesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = [
        "v " + " ".join(COORD_FORMAT.format(value) for value in vertex)
        for vertex in mesh.vertices
    ]
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_ply(
    path: str | Path,
    points: np.ndarray,
    faces: Optional[np.ndarray] = None,
    scalars: Optional[dict[str, np.ndarray]] = None,
    comments: Sequence[str] = (),
) -> None:
    """Write an ASCII PLY with x,y,z, optional per-vertex scalars and faces."""
    points = np.asarray(points, dtype=np.float64)
    scalars = scalars or {}
    for name, values in scalars.items():
        if len(values) != len(points):
            raise FormatError(f"Scalar '{name}' has {len(values)} values for {len(points)} vertices")

    header = ["ply", "format ascii 1.0"]
    header.extend(f"comment {comment}" for comment in comments)
    header.append(f"element vertex {len(points)}")
    header.extend(f"property double {axis}" for axis in ("x", "y", "z"))
    header.extend(f"property double {name}" for name in scalars)
    if faces is not None:
        header.append(f"element face {len(faces)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")

    columns = [np.asarray(values, dtype=np.float64) for values in scalars.values()]
    body = []
    for i, point in enumerate(points):
        fields = [COORD_FORMAT.format(value) for value in point]
        fields.extend(SCALAR_FORMAT.format(column[i]) for column in columns)
        body.append(" ".join(fields))
    if faces is not None:
        body.extend(f"3 {a} {b} {c}" for a, b, c in np.asarray(faces, dtype=np.int64))
    Path(path).write_text("\n".join(header + body) + "\n", encoding="utf-8")


def read_ply(path: str | Path) -> PlyData:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")

    comments: list[str] = []
    vertex_count = face_count = 0
    vertex_props: list[str] = []
    current = None
    cursor = 1
    while cursor < len(lines):
        parts = lines[cursor].split()
        cursor += 1
        if not parts:
            continue
        keyword = parts[0]
        if keyword == "format":
            if parts[1] != "ascii":
                raise FormatError(f"{path}: only ASCII PLY is supported")
        elif keyword == "comment":
            comments.append(" ".join(parts[1:]))
        elif keyword == "element":
            current = parts[1]
            if current == "vertex":
                vertex_count = int(parts[2])
            elif current == "face":
                face_count = int(parts[2])
        elif keyword == "property" and current == "vertex":
            vertex_props.append(parts[-1])
        elif keyword == "end_header":
            break
    else:
        raise FormatError(f"{path}: missing end_header")

    if vertex_props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: vertex element must start with x, y, z")
    try:
        table = np.array(
            [[float(v) for v in lines[cursor + i].split()] for i in range(vertex_count)],
            dtype=np.float64,
        ).reshape(vertex_count, len(vertex_props))
        cursor += vertex_count
        faces = None
        if face_count:
            rows = [lines[cursor + i].split() for i in range(face_count)]
            if any(int(row[0]) != 3 for row in rows):
                raise FormatError(f"{path}: only triangular faces are supported")
            faces = np.array([[int(v) for v in row[1:4]] for row in rows], dtype=np.int64)
    except (IndexError, ValueError) as e:
        raise FormatError(f"{path}: truncated or malformed PLY body: {e}") from e

    scalars = {name: table[:, 3 + i].copy() for i, name in enumerate(vertex_props[3:])}
    return PlyData(points=table[:, :3].copy(), faces=faces, scalars=scalars, comments=comments)


def write_edge_list(edges: Iterable[Sequence[int]], path: str | Path) -> None:
    Path(path).write_text("".join(f"{i} {j}\n" for i, j in edges), encoding="utf-8")


def read_edge_list(path: str | Path) -> np.ndarray:
    rows = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise FormatError(f"{path}:{line_no}: expected 'i j'")
        rows.append((int(parts[0]), int(parts[1])))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def read_cloud(path: str | Path) -> PointCloud:
    """Load a PointCloud from PLY (vertices only) or OBJ (`v` records)."""
    if Path(path).suffix.lower() == ".obj":
        return PointCloud(read_obj(path).vertices)
    return read_ply(path).cloud()


def write_cloud(cloud: PointCloud, path: str | Path, comments: Sequence[str] = ()) -> None:
    write_ply(path, cloud.points, comments=comments)
