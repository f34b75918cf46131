"""
Two-stage engine training.

Stage 1 fits the predictor D to (CAD, scan) pairs. Stage 2 freezes D and fits
the compensator G so that D(G(c)) matches the CAD c. `iterate_loop` repeats
both stages, optionally feeding oracle prints of compensated parts back into
the training set between rounds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from dataset import Dataset, Sample, part_seed
import diff_engine as de
from diff_engine import ParamSet, Tape, Tensor
from errors import ArgumentError, ConfigError, ContractError, NumericFaultError
from geometry_core import ChamberSpec
from graphnet import EngineKind, GraphEngine, NetworkConfig, Predictor, trace_composition
from losses import LossWeights, TracedLoss, trace_batch_mean, trace_deformation
from print_oracle import WarpSpec, simulate_print

logger = logging.getLogger(__name__)

LossFn = Callable[[Tape, GraphEngine, Mapping[str, Tensor], Sample], TracedLoss]


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    batch_size: Optional[int] = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_dir: Optional[Path] = None
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1).")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0 (0 disables checkpoints).")


@dataclass(frozen=True)
class AdamState:
    step: int
    first: Mapping[str, np.ndarray]
    second: Mapping[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ParamSet) -> AdamState:
        return cls(
            0,
            {name: np.zeros_like(v) for name, v in params.items()},
            {name: np.zeros_like(v) for name, v in params.items()},
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l2: float
    chamfer: float
    total: float
    validation_total: Optional[float] = None


@dataclass(frozen=True)
class TrainingResult:
    engine: GraphEngine
    history: tuple[EpochRecord, ...]
    best_epoch: int
    best_loss: float
    final_engine: GraphEngine

    @property
    def initial_total(self) -> float:
        return self.history[0].total

    @property
    def final_total(self) -> float:
        return self.history[-1].total


@dataclass(frozen=True)
class RoundResult:
    round_index: int
    predictor: TrainingResult
    compensator: TrainingResult
    dataset_hash: str


def adam_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: TrainingConfig,
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; non-finite gradients raise NumericFaultError."""
    if params.frozen:
        raise ContractError("Cannot update a frozen ParamSet.")
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ArgumentError(f"Gradient for '{name}' has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericFaultError(f"Non-finite gradient in '{name}' at step {state.step + 1}", last_good=params)

    step = state.step + 1
    bias1 = 1.0 - config.beta1**step
    bias2 = 1.0 - config.beta2**step
    first: dict[str, np.ndarray] = {}
    second: dict[str, np.ndarray] = {}
    updated: dict[str, np.ndarray] = {}
    for name, values in params.items():
        g = grads[name]
        first[name] = config.beta1 * state.first[name] + (1.0 - config.beta1) * g
        second[name] = config.beta2 * state.second[name] + (1.0 - config.beta2) * (g * g)
        m_hat = first[name] / bias1
        v_hat = second[name] / bias2
        updated[name] = values - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return params.updated(updated), AdamState(step, first, second)


def predictor_loss(weights: LossWeights) -> LossFn:
    def loss(tape: Tape, engine: GraphEngine, bound: Mapping[str, Tensor], sample: Sample) -> TracedLoss:
        cad = sample.cad.points
        shift = engine.trace_shift(tape, cad, None, sample.graph, bound)
        return trace_deformation(tape, shift, sample.scan.points, weights, base=cad)

    return loss


def compensator_loss(predictor: Predictor, weights: LossWeights) -> LossFn:
    def loss(tape: Tape, engine: GraphEngine, bound: Mapping[str, Tensor], sample: Sample) -> TracedLoss:
        cad = sample.cad.points
        shift = trace_composition(tape, cad, sample.graph, engine, predictor, bound)
        return trace_deformation(tape, shift, cad, weights, base=cad)

    return loss


def evaluate_loss(engine: GraphEngine, samples: Sequence[Sample], loss_fn: LossFn) -> TracedLoss:
    tape = Tape()
    bound = engine.params.freeze().bind(tape)
    return trace_batch_mean(tape, [loss_fn(tape, engine, bound, s) for s in samples])


def _batches(samples: Sequence[Sample], config: TrainingConfig, rng: np.random.Generator) -> list[list[Sample]]:
    if config.batch_size is None or config.batch_size >= len(samples):
        return [list(samples)]
    order = rng.permutation(len(samples))
    return [
        [samples[i] for i in order[start : start + config.batch_size]]
        for start in range(0, len(samples), config.batch_size)
    ]


def _checkpoint(engine: GraphEngine, config: TrainingConfig, round_index: int, tag: str) -> None:
    if config.checkpoint_dir is None:
        return
    directory = Path(config.checkpoint_dir)
    directory.mkdir(parents=True, exist_ok=True)
    engine.save(directory / f"{engine.kind.value}_{round_index}_{tag}.wcp")


def _fit(
    engine: GraphEngine,
    train: Sequence[Sample],
    validation: Sequence[Sample],
    loss_fn: LossFn,
    config: TrainingConfig,
    round_index: int,
    guard: Optional[Callable[[], None]] = None,
) -> TrainingResult:
    if not train:
        raise ArgumentError("No training samples.")
    rng = np.random.default_rng(config.seed)
    params = engine.params.thaw()
    state = AdamState.zeros(params)
    history: list[EpochRecord] = []
    best_loss, best_params, best_epoch = math.inf, params, 0
    label = engine.kind.value

    def score(current: ParamSet, epoch: int, train_loss: Optional[TracedLoss]) -> EpochRecord:
        nonlocal best_loss, best_params, best_epoch
        candidate = engine.with_params(current)
        train_loss = train_loss or evaluate_loss(candidate, train, loss_fn)
        val_total = evaluate_loss(candidate, validation, loss_fn).total.item() if validation else None
        record = EpochRecord(
            epoch, train_loss.l2.item(), train_loss.chamfer.item(), train_loss.total.item(), val_total
        )
        selection = val_total if val_total is not None else record.total
        if not (math.isfinite(selection) and math.isfinite(record.total)):
            _checkpoint(engine.with_params(best_params), config, round_index, "lastgood")
            raise NumericFaultError(
                f"{label} loss became non-finite at epoch {epoch}",
                last_good=engine.with_params(best_params),
            )
        if selection < best_loss:
            best_loss, best_params, best_epoch = selection, current, epoch
        return record

    logger.info(f"Training {label} on {len(train)} parts ({len(validation)} validation) for {config.epochs} epochs...")
    for epoch in range(config.epochs):
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            _checkpoint(engine.with_params(params), config, round_index, str(epoch))
        batches = _batches(train, config, rng)
        # mini-batch epochs are scored on the parameters they start from
        record = score(params, epoch, None) if len(batches) > 1 else None
        for batch in batches:
            tape = Tape()
            bound = params.bind(tape)
            batch_loss = trace_batch_mean(tape, [loss_fn(tape, engine, bound, s) for s in batch])
            if record is None:
                record = score(params, epoch, batch_loss)
            grads = de.backward(tape, batch_loss.total, bound)
            assert grads is not None
            if guard is not None:
                guard()
            try:
                params, state = adam_step(params, grads, state, config)
            except NumericFaultError as e:
                logger.error(f"{label} training aborted at epoch {epoch}: {e}")
                _checkpoint(engine.with_params(best_params), config, round_index, "lastgood")
                raise NumericFaultError(str(e), last_good=engine.with_params(best_params)) from e
            if guard is not None:
                guard()
        assert record is not None
        history.append(record)
        message = f"{label} epoch {epoch}: total {record.total:.6g} (l2 {record.l2:.6g}, chamfer {record.chamfer:.6g})"
        if record.validation_total is not None:
            message += f", validation {record.validation_total:.6g}"
        if config.log_every and epoch % config.log_every == 0:
            logger.info(message)
        else:
            logger.debug(message)

    history.append(score(params, config.epochs, None))
    best_engine = engine.with_params(best_params)
    final_engine = engine.with_params(params)
    _checkpoint(best_engine, config, round_index, "best")
    logger.info(
        f"{label} training complete: total {history[0].total:.6g} -> {history[-1].total:.6g}, "
        f"best epoch {best_epoch}."
    )
    return TrainingResult(best_engine, tuple(history), best_epoch, best_loss, final_engine)


def train_predictor(
    dataset: Dataset,
    config: TrainingConfig,
    network: Optional[NetworkConfig] = None,
    chamber: Optional[ChamberSpec] = None,
    round_index: int = 0,
) -> TrainingResult:
    """Fit D so that D(cad) matches the scan on the training parts."""
    engine = GraphEngine.initialize(EngineKind.PREDICTOR, network, chamber, seed=config.seed)
    return _fit(
        engine,
        dataset.train(),
        dataset.validation(),
        predictor_loss(config.loss_weights),
        config,
        round_index,
    )


def train_compensator(
    dataset: Dataset,
    predictor: Predictor,
    config: TrainingConfig,
    network: Optional[NetworkConfig] = None,
    chamber: Optional[ChamberSpec] = None,
    round_index: int = 0,
) -> TrainingResult:
    """Fit G so that D(G(cad)) matches the cad, with D frozen."""
    if not predictor.frozen:
        raise ContractError("Freeze the predictor before compensator training.")
    if chamber is None and isinstance(predictor, GraphEngine):
        chamber = predictor.chamber
    expected = predictor.checksum()

    def guard() -> None:
        if predictor.checksum() != expected:
            raise ContractError("Predictor parameters changed during compensator training.")

    engine = GraphEngine.initialize(EngineKind.COMPENSATOR, network, chamber, seed=config.seed + 1)
    return _fit(
        engine,
        dataset.train(),
        dataset.validation(),
        compensator_loss(predictor, config.loss_weights),
        config,
        round_index,
        guard,
    )


def _augment(
    dataset: Dataset, compensator: GraphEngine, warp: WarpSpec, config: TrainingConfig, round_index: int
) -> Dataset:
    extra = []
    for sample in dataset.train():
        part_id = f"{sample.part_id}_r{round_index}"
        compensated = compensator.forward(sample.cad, sample.graph)
        printed = simulate_print(compensated, warp, seed=part_seed(config.seed, part_id))
        extra.append(
            Sample(part_id, sample.graph.with_vertices(compensated.points), compensated, printed, sample.placement)
        )
    logger.info(f"Round {round_index}: added {len(extra)} compensated prints to the training split")
    return dataset.with_samples(extra, train=True)


def iterate_loop(
    dataset: Dataset,
    config: TrainingConfig,
    rounds: int,
    warp: Optional[WarpSpec] = None,
    augment: bool = False,
    network: Optional[NetworkConfig] = None,
    chamber: Optional[ChamberSpec] = None,
) -> list[RoundResult]:
    """Alternate predictor and compensator training for `rounds` rounds."""
    if rounds < 1:
        raise ArgumentError(f"rounds must be >= 1, got {rounds}")
    if augment and warp is None:
        raise ArgumentError("Augmentation needs a WarpSpec to print compensated parts.")
    results: list[RoundResult] = []
    current = dataset
    for round_index in range(rounds):
        logger.info(f"Round {round_index + 1}/{rounds} on dataset {current.content_hash()[:12]}...")
        predictor = train_predictor(current, config, network, chamber, round_index)
        compensator = train_compensator(
            current, predictor.engine.freeze(), config, network, chamber, round_index
        )
        results.append(RoundResult(round_index, predictor, compensator, current.content_hash()))
        if augment and round_index + 1 < rounds:
            assert warp is not None
            current = _augment(current, compensator.engine, warp, config, round_index)
    return results


def write_loss_curve(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "l2", "chamfer", "total", "validation_total"])
        for record in history:
            writer.writerow(
                [
                    record.epoch,
                    f"{record.l2:.9g}",
                    f"{record.chamfer:.9g}",
                    f"{record.total:.9g}",
                    "" if record.validation_total is None else f"{record.validation_total:.9g}",
                ]
            )
