"""
EdgeConv graph network shared by the predictor and compensator engines.

Each layer computes, per vertex i,
    h_i = ReLU( mean_j theta . (x_i || x_i - x_j) + b )
over the IsoGraph neighbors j of i. Because theta is linear this equals
theta . (x_i || x_i - mean_j x_j), which is what the tape records. A linear
head maps the last layer to a 3D residual added to the input coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import logging
from pathlib import Path
from typing import Mapping, Optional, Protocol

import numpy as np

import diff_engine as de
from diff_engine import ParamSet, Tape, Tensor
from errors import AlignmentError, ConfigError, ContractError, FormatError
from geometry_core import ChamberSpec, PointCloud
from remesh import IsoGraph

logger = logging.getLogger(__name__)

DEFAULT_LAYER_WIDTHS = (64, 64, 64, 64)
MODEL_FORMAT = "graphcompnet-model-1"
HEADER_END = b"END_HEADER\n"


class EngineKind(str, Enum):
    PREDICTOR = "predictor"
    COMPENSATOR = "compensator"


@dataclass(frozen=True)
class NetworkConfig:
    layer_widths: tuple[int, ...] = DEFAULT_LAYER_WIDTHS
    input_width: int = 3
    output_width: int = 3
    activation: str = "relu"
    position_aware: bool = True
    zero_residual: bool = True

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        if not widths or any(w < 1 for w in widths):
            raise ConfigError(f"layer_widths must be positive integers, got {self.layer_widths}")
        object.__setattr__(self, "layer_widths", widths)
        if self.input_width != 3 or self.output_width != 3:
            raise ConfigError("Engines read and write xyz: input and output width must be 3.")
        if self.activation != "relu":
            raise ConfigError(f"Unsupported activation '{self.activation}'")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        width = self.input_width
        for layer, out in enumerate(self.layer_widths):
            shapes[f"edge_conv_{layer}.weight"] = (2 * width, out)
            shapes[f"edge_conv_{layer}.bias"] = (out,)
            width = out
        shapes["head.weight"] = (width, self.output_width)
        shapes["head.bias"] = (self.output_width,)
        return shapes


def init_params(config: NetworkConfig, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases; zero head when config.zero_residual."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        elif name == "head.weight" and config.zero_residual:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = de.glorot_uniform(shape[0], shape[1], rng)
    return ParamSet(tensors)


def edge_conv(
    tape: Tape,
    features: Tensor,
    graph: IsoGraph,
    weight: Tensor,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """One EdgeConv layer followed by ReLU."""
    if features.shape[0] != graph.vertex_count:
        raise AlignmentError(
            f"{features.shape[0]} feature rows for a graph of {graph.vertex_count} vertices"
        )
    neighborhood = de.gather_mean(
        tape, features, graph.neighbor_offsets, graph.neighbor_indices, matrix=graph.neighbor_mean
    )
    edge_features = de.concat(tape, features, de.sub(tape, features, neighborhood))
    return de.relu(tape, de.affine(tape, edge_features, weight, bias))


class Predictor(Protocol):
    """
    Anything that can stand in for D(.) inside the compensator objective.

    Inputs and outputs are displacements from a fixed base cloud: the engine
    sees base + shift and returns D(base + shift) - base.
    """

    frozen: bool

    def trace_shift(
        self, tape: Tape, base: np.ndarray, shift: Optional[Tensor], graph: IsoGraph
    ) -> Tensor: ...

    def checksum(self) -> str: ...


@dataclass(frozen=True, eq=False)
class GraphEngine:
    kind: EngineKind
    params: ParamSet
    config: NetworkConfig = field(default_factory=NetworkConfig)
    chamber: ChamberSpec = field(default_factory=ChamberSpec)

    def __post_init__(self) -> None:
        expected = self.config.param_shapes()
        actual = {name: tuple(values.shape) for name, values in self.params.items()}
        if actual != expected:
            raise ConfigError(f"Parameters do not match the network config: {actual} vs {expected}")

    @classmethod
    def initialize(
        cls,
        kind: EngineKind,
        config: Optional[NetworkConfig] = None,
        chamber: Optional[ChamberSpec] = None,
        seed: int = 0,
    ) -> GraphEngine:
        config = config or NetworkConfig()
        return cls(kind, init_params(config, seed), config, chamber or ChamberSpec())

    @property
    def frozen(self) -> bool:
        return self.params.frozen

    def freeze(self) -> GraphEngine:
        return GraphEngine(self.kind, self.params.freeze(), self.config, self.chamber)

    def with_params(self, params: ParamSet) -> GraphEngine:
        return GraphEngine(self.kind, params, self.config, self.chamber)

    def checksum(self) -> str:
        return self.params.checksum()

    def features(self, tape: Tape, base: np.ndarray, shift: Optional[Tensor] = None) -> Tensor:
        """
        Chamber coordinates of base + shift mapped to the unit cube.

        Position-blind configs re-centre the part first. The base enters as a
        folded constant so that only the shift is recorded.
        """
        scale = 1.0 / self.chamber.extent
        if self.config.position_aware:
            fixed = tape.constant((base - self.chamber.min_corner) * scale)
        else:
            fixed = tape.constant((base - base.mean(axis=0)) * scale + 0.5)
        if shift is None:
            return fixed
        moved = shift if self.config.position_aware else de.center_rows(tape, shift)
        return de.add(tape, fixed, de.scale_shift(tape, moved, scale, np.zeros(3)))

    def trace_shift(
        self,
        tape: Tape,
        base: np.ndarray,
        shift: Optional[Tensor],
        graph: IsoGraph,
        bound: Optional[Mapping[str, Tensor]] = None,
    ) -> Tensor:
        """Record output - base for the input base + shift (shift None means zero)."""
        base = np.asarray(base, dtype=np.float64)
        if base.shape != (graph.vertex_count, 3):
            raise AlignmentError(
                f"Engine input has shape {base.shape}, graph has {graph.vertex_count} vertices"
            )
        if shift is not None and shift.shape != base.shape:
            raise AlignmentError(f"Shift has shape {shift.shape}, base has {base.shape}")
        bound = bound if bound is not None else self.params.bind(tape)
        hidden = self.features(tape, base, shift)
        for layer in range(len(self.config.layer_widths)):
            hidden = edge_conv(
                tape,
                hidden,
                graph,
                bound[f"edge_conv_{layer}.weight"],
                bound[f"edge_conv_{layer}.bias"],
            )
        residual = de.affine(tape, hidden, bound["head.weight"], bound["head.bias"])
        return residual if shift is None else de.add(tape, shift, residual)

    def forward(self, cloud: PointCloud, graph: IsoGraph) -> PointCloud:
        return PointCloud(cloud.points + self.trace_shift(Tape(), cloud.points, None, graph).values)

    def save(self, path: str | Path) -> None:
        header = {
            "format": MODEL_FORMAT,
            "engine": self.kind.value,
            "layer_widths": ",".join(str(w) for w in self.config.layer_widths),
            "input_width": str(self.config.input_width),
            "output_width": str(self.config.output_width),
            "activation": self.config.activation,
            "position_aware": str(self.config.position_aware).lower(),
            "chamber_min": ",".join(repr(float(v)) for v in self.chamber.min_corner),
            "chamber_max": ",".join(repr(float(v)) for v in self.chamber.max_corner),
            "feature_scale": ",".join(repr(float(v)) for v in 1.0 / self.chamber.extent),
        }
        text = "".join(f"{key}={value}\n" for key, value in header.items())
        Path(path).write_bytes(text.encode("utf-8") + HEADER_END + self.params.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> GraphEngine:
        blob = Path(path).read_bytes()
        split = blob.find(HEADER_END)
        if split < 0:
            raise FormatError(f"{path}: model file has no END_HEADER line")
        header: dict[str, str] = {}
        for line in blob[:split].decode("utf-8").splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"{path}: malformed header line '{line}'")
            header[key.strip()] = value.strip()
        if header.get("format") != MODEL_FORMAT:
            raise FormatError(f"{path}: unknown model format {header.get('format')!r}")

        def floats(key: str) -> list[float]:
            return [float(v) for v in header[key].split(",")]

        try:
            config = NetworkConfig(
                layer_widths=tuple(int(w) for w in header["layer_widths"].split(",")),
                input_width=int(header["input_width"]),
                output_width=int(header["output_width"]),
                activation=header["activation"],
                position_aware=header["position_aware"] == "true",
            )
            chamber = ChamberSpec(np.array(floats("chamber_min")), np.array(floats("chamber_max")))
            kind = EngineKind(header["engine"])
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: bad model header: {e}") from e
        params = ParamSet.from_bytes(blob[split + len(HEADER_END) :])
        try:
            return cls(kind, params, config, chamber)
        except ConfigError as e:
            raise FormatError(f"{path}: {e}") from e


def engine_forward(
    cloud: PointCloud,
    graph: IsoGraph,
    params: ParamSet,
    kind: EngineKind,
    config: Optional[NetworkConfig] = None,
    chamber: Optional[ChamberSpec] = None,
) -> PointCloud:
    """D(c) for the predictor, G(c) for the compensator; output = input + residual."""
    if len(cloud) != graph.vertex_count:
        raise AlignmentError(f"Cloud has {len(cloud)} points, graph has {graph.vertex_count} vertices")
    engine = GraphEngine(kind, params, config or NetworkConfig(), chamber or ChamberSpec())
    return engine.forward(cloud, graph)


def trace_composition(
    tape: Tape,
    base: np.ndarray,
    graph: IsoGraph,
    compensator: GraphEngine,
    predictor: Predictor,
    compensator_bound: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """Record D(G(c)) - c with D frozen."""
    if not predictor.frozen:
        raise ContractError("The predictor must be frozen while it scores compensated shapes.")
    compensated = compensator.trace_shift(tape, base, None, graph, compensator_bound)
    return predictor.trace_shift(tape, base, compensated, graph)


def compose_comp_pred(
    cloud: PointCloud,
    graph: IsoGraph,
    compensator: GraphEngine,
    predictor: Predictor,
) -> PointCloud:
    """Predicted printed shape of the compensated CAD: D(G(c))."""
    if len(cloud) != graph.vertex_count:
        raise AlignmentError(f"Cloud has {len(cloud)} points, graph has {graph.vertex_count} vertices")
    shift = trace_composition(Tape(), cloud.points, graph, compensator, predictor)
    return PointCloud(cloud.points + shift.values)
