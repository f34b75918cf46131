"""
Training samples: a placed IsoGraph, its CAD cloud and the index-aligned scan.

Synthetic datasets come from build layouts (where identical parts sit in the
chamber) printed through the oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import logging
from typing import Iterable, Optional, Sequence

import numpy as np

from errors import AlignmentError, ArgumentError
from geometry_core import ChamberSpec, Placement, PointCloud, TriangleMesh, resample_uniform
from part_library import BAR_SIZE
from print_oracle import WarpSpec, simulate_print
from registration import correspond
from remesh import IsoGraph, remesh

logger = logging.getLogger(__name__)

DEFAULT_TRAIN_FRACTION = 0.1
DEFAULT_DATASET_VOXEL = 2.0
BUCKET_KINDS = ("stack", "vertical", "rot")


@dataclass(frozen=True, eq=False)
class Sample:
    part_id: str
    graph: IsoGraph
    cad: PointCloud
    scan: PointCloud
    placement: Placement = field(default_factory=Placement)

    def __post_init__(self) -> None:
        if len(self.cad) != self.graph.vertex_count:
            raise AlignmentError(
                f"{self.part_id}: CAD cloud has {len(self.cad)} points, graph has "
                f"{self.graph.vertex_count} vertices"
            )
        if len(self.scan) != len(self.cad):
            raise AlignmentError(
                f"{self.part_id}: scan targets must be index-aligned with the CAD cloud"
            )


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[Sample, ...]
    train_ids: tuple[str, ...]
    validation_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "train_ids", tuple(self.train_ids))
        object.__setattr__(self, "validation_ids", tuple(self.validation_ids))
        ids = [s.part_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ArgumentError("Part ids must be unique within a dataset.")
        if not self.train_ids:
            raise ArgumentError("Dataset needs at least one training sample.")
        unknown = (set(self.train_ids) | set(self.validation_ids)) - set(ids)
        if unknown:
            raise ArgumentError(f"Split refers to unknown parts: {sorted(unknown)}")
        if set(self.train_ids) & set(self.validation_ids):
            raise ArgumentError("Train and validation splits overlap.")

    def __len__(self) -> int:
        return len(self.samples)

    def get(self, part_id: str) -> Sample:
        for sample in self.samples:
            if sample.part_id == part_id:
                return sample
        raise KeyError(part_id)

    def train(self) -> list[Sample]:
        return [self.get(pid) for pid in self.train_ids]

    def validation(self) -> list[Sample]:
        return [self.get(pid) for pid in self.validation_ids]

    def with_samples(self, extra: Sequence[Sample], train: bool = True) -> Dataset:
        """A new dataset with `extra` appended to the train (or validation) split."""
        new_ids = tuple(s.part_id for s in extra)
        if train:
            return Dataset(self.samples + tuple(extra), self.train_ids + new_ids, self.validation_ids)
        return Dataset(self.samples + tuple(extra), self.train_ids, self.validation_ids + new_ids)

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for sample in self.samples:
            digest.update(sample.part_id.encode("utf-8"))
            digest.update(sample.graph.edges.astype("<i8").tobytes())
            digest.update(sample.cad.points.astype("<f8").tobytes())
            digest.update(sample.scan.points.astype("<f8").tobytes())
        digest.update(("train:" + ",".join(self.train_ids)).encode("utf-8"))
        digest.update(("validation:" + ",".join(self.validation_ids)).encode("utf-8"))
        return digest.hexdigest()


def part_seed(seed: int, part_id: str) -> int:
    """Per-part noise seed, stable under reordering of the dataset."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{part_id}".encode("utf-8")).digest()[:8], "little")


def split_ids(
    ids: Sequence[str], train_fraction: float = DEFAULT_TRAIN_FRACTION, seed: int = 0
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Seeded random split; at least one train id, and one validation id when there are two or more."""
    if not 0 < train_fraction <= 1:
        raise ArgumentError(f"train_fraction must be in (0, 1], got {train_fraction}")
    if not ids:
        raise ArgumentError("Cannot split an empty id list.")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = max(1, int(round(train_fraction * len(ids))))
    if len(ids) > 1:
        n_train = min(n_train, len(ids) - 1)
    train = tuple(sorted(ids[i] for i in order[:n_train]))
    validation = tuple(sorted(ids[i] for i in order[n_train:]))
    return train, validation


# --- build layouts ------------------------------------------------------------


def _axis_positions(count: int, lo: float, hi: float) -> np.ndarray:
    if count == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, count)


def bar_nesting_layout(
    chamber: Optional[ChamberSpec] = None,
    columns: int = 3,
    rows: int = 2,
    layers: int = 2,
    part_size: Sequence[float] = BAR_SIZE,
    pitch: float = 100.0,
    margin: float = 5.0,
) -> list[Placement]:
    """
    Grid of identical bars, long axis along x.

    Columns are centred at chamber_center_x + m * pitch so every bar sits on
    the same dome phase; rows and layers spread evenly between the walls.
    """
    chamber = chamber or ChamberSpec()
    size = np.asarray(part_size, dtype=np.float64)
    if min(columns, rows, layers) < 1:
        raise ArgumentError("Layout needs at least one column, row and layer.")
    half = 0.5 * size
    xs = chamber.center[0] + (np.arange(columns) - (columns - 1) / 2.0) * pitch
    ys = _axis_positions(
        rows, chamber.min_corner[1] + half[1] + margin, chamber.max_corner[1] - half[1] - margin
    )
    zs = _axis_positions(
        layers, chamber.min_corner[2] + half[2] + margin, chamber.max_corner[2] - half[2] - margin
    )
    placements = [
        Placement(np.eye(3), np.array([x, y, z])) for z in zs for y in ys for x in xs
    ]
    for p in placements:
        lo, hi = p.translation - half, p.translation + half
        if not (np.all(chamber.contains(lo)) and np.all(chamber.contains(hi))):
            raise ArgumentError(f"Bar slot at {p.translation.tolist()} does not fit in the chamber")
    return placements


def bucket_layout(
    kind: str,
    chamber: Optional[ChamberSpec] = None,
    count: int = 4,
    spacing: float = 20.0,
    angle_deg: float = 17.0,
) -> list[Placement]:
    """
    Molded-fiber style buckets of identical plates.

    stack: plates stacked along z at the chamber centre; vertical: plates
    stood on edge (rotated 90 degrees about x) side by side along y; rot: the
    stack with the top plate rotated `angle_deg` downward about x.
    """
    if kind not in BUCKET_KINDS:
        raise ArgumentError(f"Unknown bucket kind '{kind}', expected one of {BUCKET_KINDS}")
    if count < 1:
        raise ArgumentError("A bucket needs at least one part.")
    chamber = chamber or ChamberSpec()
    center = chamber.center
    offsets = (np.arange(count) - (count - 1) / 2.0) * spacing
    if kind == "vertical":
        return [
            Placement.from_euler(rx=90.0, translation=center + np.array([0.0, dy, 0.0]))
            for dy in offsets
        ]
    placements = [Placement(np.eye(3), center + np.array([0.0, 0.0, dz])) for dz in offsets]
    if kind == "rot":
        placements[-1] = Placement.from_euler(rx=-angle_deg, translation=placements[-1].translation)
    return placements


# --- dataset construction ---------------------------------------------------------


def place_graph(graph: IsoGraph, placement: Placement) -> IsoGraph:
    return graph.with_vertices(placement.apply(graph.vertices))


def build_synthetic_dataset(
    mesh: TriangleMesh,
    train_placements: Sequence[Placement],
    validation_placements: Sequence[Placement] = (),
    warp: Optional[WarpSpec] = None,
    voxel_size: float = DEFAULT_DATASET_VOXEL,
    seed: int = 0,
    scan_points: Optional[int] = None,
) -> Dataset:
    """
    Remesh `mesh` once, place a copy per placement and print each through the oracle.

    With scan_points=None the scan is the printed graph vertices. Otherwise the
    oracle prints a uniform resample of the placed mesh with `scan_points`
    points and targets come from nearest-neighbor correspondence.
    """
    warp = warp or WarpSpec()
    if not train_placements:
        raise ArgumentError("At least one training placement is required.")
    logger.info(
        f"Building synthetic dataset: {len(train_placements)} train + "
        f"{len(validation_placements)} validation placements..."
    )
    base_graph = remesh(mesh, voxel_size=voxel_size, seed=seed)
    samples: list[Sample] = []
    train_ids: list[str] = []
    validation_ids: list[str] = []
    all_placements = [(p, True) for p in train_placements] + [(p, False) for p in validation_placements]
    for index, (placement, is_train) in enumerate(all_placements):
        part_id = f"part_{index:03d}"
        graph = place_graph(base_graph, placement)
        cad = graph.cloud()
        noise_seed = part_seed(seed, part_id)
        if scan_points is None:
            scan = simulate_print(cad, warp, seed=noise_seed)
        else:
            dense = resample_uniform(mesh.transformed(placement), scan_points, noise_seed)
            printed = simulate_print(dense, warp, seed=noise_seed)
            match = correspond(cad, printed)
            scan = PointCloud(printed.points[match.scan_indices])
        samples.append(Sample(part_id, graph, cad, scan, placement))
        (train_ids if is_train else validation_ids).append(part_id)
    dataset = Dataset(tuple(samples), tuple(train_ids), tuple(validation_ids))
    logger.info(
        f"Dataset complete: {len(samples)} parts of {base_graph.vertex_count} points each."
    )
    return dataset


def dataset_from_clouds(
    graph: IsoGraph,
    cads: Sequence[PointCloud],
    scans: Sequence[PointCloud],
    train_fraction: float = DEFAULT_TRAIN_FRACTION,
    seed: int = 0,
    part_ids: Optional[Iterable[str]] = None,
) -> Dataset:
    """
    Pair placed CAD clouds (one per part, aligned with `graph`'s vertices) with
    scans of any density. A scan with exactly the CAD point count is taken as
    index-aligned; other scans are matched by nearest-neighbor correspondence.
    """
    if len(cads) != len(scans):
        raise AlignmentError(f"{len(cads)} CAD clouds but {len(scans)} scans")
    if not cads:
        raise ArgumentError("No parts supplied.")
    ids = list(part_ids) if part_ids is not None else [f"part_{i:03d}" for i in range(len(cads))]
    samples = []
    for part_id, cad, scan in zip(ids, cads, scans):
        if len(cad) != graph.vertex_count:
            raise AlignmentError(
                f"{part_id}: CAD cloud has {len(cad)} points, graph has {graph.vertex_count}"
            )
        if len(scan) == len(cad):
            target = scan
        else:
            match = correspond(cad, scan)
            target = PointCloud(scan.points[match.scan_indices])
        samples.append(Sample(part_id, graph.with_vertices(cad.points), cad, target))
    train, validation = split_ids(ids, train_fraction, seed)
    return Dataset(tuple(samples), train, validation)
