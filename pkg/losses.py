"""
Deformation losses: mean squared displacement (L2), Chamfer distance and their sum.

The plain functions take PointClouds and return floats; the `trace_*`
variants record the same computation on a Tape so the engines can be trained
through them. Targets are always constants.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Optional, Sequence, Union

import numpy as np

import diff_engine as de
from diff_engine import Tape, Tensor
from errors import AlignmentError, ArgumentError, EmptyCloudError
from geometry_core import PointCloud, SpatialIndex

logger = logging.getLogger(__name__)

CloudLike = Union[PointCloud, np.ndarray]


@dataclass(frozen=True)
class LossWeights:
    l2: float = 1.0
    chamfer: float = 1.0

    def __post_init__(self) -> None:
        if self.l2 < 0 or self.chamfer < 0:
            raise ArgumentError(f"Loss weights must be non-negative, got {self}")


@dataclass(frozen=True)
class LossBreakdown:
    l2: float
    chamfer: float
    total: float


@dataclass(frozen=True)
class TracedLoss:
    """Loss nodes recorded on a tape."""

    l2: Tensor
    chamfer: Tensor
    total: Tensor

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(self.l2.item(), self.chamfer.item(), self.total.item())


def _points(cloud: CloudLike) -> np.ndarray:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise EmptyCloudError("Loss inputs must be nonempty point sets.")
    return points


def _folded(pred: Tensor, base: Optional[np.ndarray]) -> np.ndarray:
    if base is None:
        return np.asarray(pred.values, dtype=np.float64)
    if base.shape != pred.shape:
        raise AlignmentError(f"Shift has shape {pred.shape}, base has {base.shape}")
    return np.asarray(pred.values + base, dtype=np.float64)


def trace_l2(
    tape: Tape, pred: Tensor, target: np.ndarray, base: Optional[np.ndarray] = None
) -> Tensor:
    """
    (1/n) sum_i |pred_i - target_i|^2.

    With `base`, pred holds displacements from base and base - target is
    folded into one constant before the shift is added.
    """
    if pred.shape != target.shape:
        raise AlignmentError(f"L2 needs index-aligned clouds, got {pred.shape} and {target.shape}")
    if base is None:
        return de.mean_sq(tape, de.sub(tape, pred, tape.constant(target)))
    if base.shape != pred.shape:
        raise AlignmentError(f"Shift has shape {pred.shape}, base has {base.shape}")
    return de.mean_sq(tape, de.add(tape, pred, tape.constant(base - target)))


def trace_chamfer(
    tape: Tape, pred: Tensor, target: np.ndarray, base: Optional[np.ndarray] = None
) -> Tensor:
    """
    Sum of unsquared nearest-neighbor distances in both directions.

    Each min term passes its gradient only through its argmin pair; ties go to
    the lowest index. `base` works as in `trace_l2`.
    """
    if pred.shape[0] == 0 or target.shape[0] == 0:
        raise EmptyCloudError("Chamfer distance needs two nonempty clouds.")
    points = _folded(pred, base)
    to_target, _ = SpatialIndex(target).query(points)
    to_pred, _ = SpatialIndex(points).query(target)
    if base is None:
        fixed = tape.constant(target)
        forward = de.sub(tape, pred, de.gather_rows(tape, fixed, to_target))
        reverse = de.sub(tape, fixed, de.gather_rows(tape, pred, to_pred))
    else:
        forward = de.add(tape, pred, tape.constant(base - target[to_target]))
        reverse = de.sub(
            tape, tape.constant(target - base[to_pred]), de.gather_rows(tape, pred, to_pred)
        )
    return de.add(tape, de.row_norm_sum(tape, forward), de.row_norm_sum(tape, reverse))


def trace_deformation(
    tape: Tape,
    pred: Tensor,
    target: np.ndarray,
    weights: LossWeights | None = None,
    base: Optional[np.ndarray] = None,
) -> TracedLoss:
    weights = weights or LossWeights()
    l2 = trace_l2(tape, pred, target, base)
    chamfer = trace_chamfer(tape, pred, target, base)
    if weights.l2 == 1.0 and weights.chamfer == 1.0:
        total = de.add(tape, l2, chamfer)
    else:
        total = de.add(
            tape, de.mul_scalar(tape, l2, weights.l2), de.mul_scalar(tape, chamfer, weights.chamfer)
        )
    return TracedLoss(l2, chamfer, total)


def trace_batch_mean(tape: Tape, losses: Sequence[TracedLoss]) -> TracedLoss:
    """Average per-part losses, reduced in list order."""
    if not losses:
        raise ArgumentError("Cannot average an empty batch.")
    scale = 1.0 / len(losses)
    reduced = []
    for attr in ("l2", "chamfer", "total"):
        acc = getattr(losses[0], attr)
        for item in losses[1:]:
            acc = de.add(tape, acc, getattr(item, attr))
        reduced.append(de.mul_scalar(tape, acc, scale) if len(losses) > 1 else acc)
    return TracedLoss(*reduced)


def l2_loss(pred: CloudLike, target: CloudLike) -> float:
    p, t = _points(pred), _points(target)
    tape = Tape()
    return trace_l2(tape, tape.constant(p), t).item()


def chamfer_loss(a: CloudLike, b: CloudLike) -> float:
    p, t = _points(a), _points(b)
    tape = Tape()
    return trace_chamfer(tape, tape.constant(p), t).item()


def deformation_loss(
    pred: CloudLike, target: CloudLike, weights: LossWeights | None = None
) -> LossBreakdown:
    p, t = _points(pred), _points(target)
    tape = Tape()
    return trace_deformation(tape, tape.constant(p), t, weights).breakdown()
