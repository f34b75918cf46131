"""
Synthetic print-and-scan oracle.

Not a physics model: an analytic, position-dependent warp that bends parts
along z with a cosine dome and amplifies the bend toward the chamber edges,

    d(p) = A * (1 + gamma * r(p)^2) * cos(2 pi (p_x - c_x) / lambda) * z_hat

where r(p) = |p - c| / (chamber half diagonal) and c is the chamber centre.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import logging
import math
from typing import Optional

import numpy as np

import diff_engine as de
from diff_engine import Tape, Tensor
from errors import ArgumentError, ConfigError, OutOfChamberError
from geometry_core import ChamberSpec, PointCloud
from remesh import IsoGraph

logger = logging.getLogger(__name__)

COMPENSATION_ITERATIONS = 100
COMPENSATION_TOLERANCE = 1e-12


@dataclass(frozen=True)
class WarpSpec:
    amplitude: float = 1.0
    edge_gain: float = 2.0
    wavelength: float = 100.0
    noise: float = 0.02
    chamber: ChamberSpec = field(default_factory=ChamberSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.amplitude < 0:
            raise ConfigError(f"warp amplitude must be >= 0, got {self.amplitude}")
        if self.edge_gain < 0:
            raise ConfigError(f"warp edge gain must be >= 0, got {self.edge_gain}")
        if not self.wavelength > 0:
            raise ConfigError(f"warp wavelength must be > 0, got {self.wavelength}")
        if self.noise < 0:
            raise ConfigError(f"warp noise must be >= 0, got {self.noise}")

    def fingerprint(self) -> str:
        text = (
            f"{self.amplitude!r}|{self.edge_gain!r}|{self.wavelength!r}|{self.noise!r}|"
            f"{self.chamber.min_corner.tolist()!r}|{self.chamber.max_corner.tolist()!r}|{self.seed}"
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _check_inside(points: np.ndarray, spec: WarpSpec) -> None:
    inside = spec.chamber.contains(points)
    if not np.all(inside):
        first = int(np.flatnonzero(~inside)[0])
        raise OutOfChamberError(f"Point {first} at {points[first].tolist()} lies outside the chamber")


def radial_fraction(points: np.ndarray, spec: WarpSpec) -> np.ndarray:
    """0 at the chamber centre, 1 at a corner."""
    pts = np.atleast_2d(de.as_working(points))
    return np.linalg.norm(pts - spec.chamber.center, axis=1) / spec.chamber.half_diagonal


def warp_field(points: np.ndarray, spec: WarpSpec) -> np.ndarray:
    """Displacement for every row of `points` (n, 3)."""
    pts = np.atleast_2d(de.as_working(points))
    _check_inside(pts, spec)
    gain = 1.0 + spec.edge_gain * radial_fraction(pts, spec) ** 2
    dome = np.cos(2.0 * math.pi * (pts[:, 0] - spec.chamber.center[0]) / spec.wavelength)
    out = np.zeros_like(pts)
    out[:, 2] = spec.amplitude * gain * dome
    return out


def warp_displacement(p: np.ndarray, spec: WarpSpec) -> np.ndarray:
    """Displacement at a single chamber point."""
    return warp_field(np.asarray(p, dtype=np.float64).reshape(1, 3), spec)[0]


def warp_jacobian(points: np.ndarray, spec: WarpSpec) -> np.ndarray:
    """J[i, a, b] = d d_a / d p_b at every point; only the z row is nonzero."""
    pts = np.atleast_2d(de.as_working(points))
    _check_inside(pts, spec)
    offset = pts - spec.chamber.center
    half_sq = spec.chamber.half_diagonal**2
    gain = 1.0 + spec.edge_gain * np.sum(offset**2, axis=1) / half_sq
    phase = 2.0 * math.pi * offset[:, 0] / spec.wavelength
    dome = np.cos(phase)
    jac = np.zeros((pts.shape[0], 3, 3))
    jac[:, 2, :] = spec.amplitude * dome[:, None] * (2.0 * spec.edge_gain / half_sq) * offset
    jac[:, 2, 0] -= spec.amplitude * gain * (2.0 * math.pi / spec.wavelength) * np.sin(phase)
    return jac


def simulate_print(cad: PointCloud, spec: WarpSpec, seed: Optional[int] = None) -> PointCloud:
    """s_i = c_i + d(c_i) + N(0, sigma^2) per coordinate; noise only when sigma > 0."""
    printed = cad.points + warp_field(cad.points, spec)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        printed = printed + rng.normal(0.0, spec.noise, size=printed.shape)
    return PointCloud(printed)


def oracle_compensation(cloud: PointCloud, spec: WarpSpec) -> PointCloud:
    """Fixed point c' = c - d(c'): the compensated CAD the noiseless oracle prints back to c."""
    target = cloud.points
    current = target.copy()
    for iteration in range(1, COMPENSATION_ITERATIONS + 1):
        updated = target - warp_field(current, spec)
        change = float(np.abs(updated - current).max())
        current = updated
        if change < COMPENSATION_TOLERANCE:
            logger.debug(f"Oracle compensation converged after {iteration} iterations")
            break
    else:
        logger.warning(f"Oracle compensation stopped at {COMPENSATION_ITERATIONS} iterations (step {change:.3e})")
    return PointCloud(current)


@dataclass(frozen=True)
class OraclePredictor:
    """The analytic warp as a predictor engine: D(c) = c + d(c), never trainable."""

    spec: WarpSpec
    frozen: bool = True

    def __post_init__(self) -> None:
        if not self.frozen:
            raise ArgumentError("OraclePredictor has no trainable parameters; it is always frozen.")

    def trace_shift(
        self, tape: Tape, base: np.ndarray, shift: Optional[Tensor], graph: IsoGraph
    ) -> Tensor:
        """Record d(base + shift) + shift."""
        fixed = tape.constant(base)
        points = fixed if shift is None else de.add(tape, fixed, shift)
        displacement = de.pointwise_field(
            tape,
            points,
            lambda p: warp_field(p, self.spec),
            lambda p: warp_jacobian(p, self.spec),
        )
        return displacement if shift is None else de.add(tape, shift, displacement)

    def forward(self, cloud: PointCloud, graph: IsoGraph) -> PointCloud:
        return PointCloud(cloud.points + warp_field(cloud.points, self.spec))

    def checksum(self) -> str:
        return self.spec.fingerprint()
