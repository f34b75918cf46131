"""
Run configuration: the key=value config file, typed config builders and the
reproducibility manifest written by every CLI run.
"""
from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import yaml

from errors import ConfigError
from geometry_core import ChamberSpec, DEFAULT_RESAMPLE_POINTS
from graphnet import NetworkConfig
from losses import LossWeights
from print_oracle import WarpSpec
from trainer import TrainingConfig

logger = logging.getLogger(__name__)

PACKAGE_VERSION = "0.1.0"

DEFAULTS: dict[str, Any] = {
    "chamber.min": [0.0, 0.0, 0.0],
    "chamber.max": [380.0, 284.0, 380.0],
    "warp.amplitude": 1.0,
    "warp.edge_gain": 2.0,
    "warp.wavelength": 100.0,
    "warp.noise": 0.02,
    "net.layer_widths": [64, 64, 64, 64],
    "net.position_aware": True,
    "train.learning_rate": 1e-3,
    "train.epochs": 1000,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.epsilon": 1e-8,
    "train.batch_size": None,
    "train.checkpoint_every": 0,
    "train.train_fraction": 0.1,
    "train.rounds": 1,
    "train.augment": False,
    "loss.l2_weight": 1.0,
    "loss.chamfer_weight": 1.0,
    "remesh.voxel_size": None,
    "resample.points": DEFAULT_RESAMPLE_POINTS,
}


def parse_value(text: str) -> Any:
    """int, then float, then YAML scalar/list (true, null, [64, 64], ...)."""
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse config value '{text}': {e}") from e


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{line_no}: unknown key '{key}'")
        values[key] = parse_value(value)
    return values


class RunConfig:
    """Resolved settings: defaults, then the config file, then explicit overrides."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"Unknown config key '{key}'")
            self._values[key] = value

    @classmethod
    def load(cls, path: Optional[str | Path]) -> RunConfig:
        if path is None:
            return cls()
        path = Path(path)
        logger.debug(f"Reading config from {path}")
        return cls(parse_config_text(path.read_text(encoding="utf-8"), str(path)))

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def override(self, **overrides: Any) -> RunConfig:
        """Apply non-None overrides given as `warp__noise=0.0` style keyword names."""
        merged = dict(self._values)
        for name, value in overrides.items():
            if value is not None:
                merged[name.replace("__", ".")] = value
        return RunConfig(merged)

    def items(self) -> list[tuple[str, Any]]:
        return sorted(self._values.items())

    def _float(self, key: str) -> float:
        try:
            return float(self._values[key])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"'{key}' must be a number, got {self._values[key]!r}") from e

    def chamber(self) -> ChamberSpec:
        try:
            return ChamberSpec(
                np.asarray(self._values["chamber.min"], dtype=np.float64),
                np.asarray(self._values["chamber.max"], dtype=np.float64),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Bad chamber extents: {e}") from e

    def warp(self, seed: int) -> WarpSpec:
        return WarpSpec(
            amplitude=self._float("warp.amplitude"),
            edge_gain=self._float("warp.edge_gain"),
            wavelength=self._float("warp.wavelength"),
            noise=self._float("warp.noise"),
            chamber=self.chamber(),
            seed=seed,
        )

    def network(self) -> NetworkConfig:
        widths = self._values["net.layer_widths"]
        if isinstance(widths, int):
            widths = [widths]
        if not isinstance(widths, (list, tuple)):
            raise ConfigError(f"net.layer_widths must be a list, got {widths!r}")
        return NetworkConfig(layer_widths=tuple(widths), position_aware=bool(self._values["net.position_aware"]))

    def loss_weights(self) -> LossWeights:
        return LossWeights(l2=self._float("loss.l2_weight"), chamfer=self._float("loss.chamfer_weight"))

    def training(self, seed: int, checkpoint_dir: Optional[Path] = None) -> TrainingConfig:
        batch = self._values["train.batch_size"]
        return TrainingConfig(
            learning_rate=self._float("train.learning_rate"),
            epochs=int(self._values["train.epochs"]),
            beta1=self._float("train.beta1"),
            beta2=self._float("train.beta2"),
            epsilon=self._float("train.epsilon"),
            seed=seed,
            batch_size=None if batch is None else int(batch),
            loss_weights=self.loss_weights(),
            checkpoint_dir=checkpoint_dir,
            checkpoint_every=int(self._values["train.checkpoint_every"]),
        )


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path: str | Path, entries: Mapping[str, Any]) -> None:
    """key=value lines in insertion order; no timestamps so reruns are byte-identical."""
    lines = [f"version={PACKAGE_VERSION}"]
    lines.extend(f"{key}={value}" for key, value in entries.items())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, sep, value = line.partition("=")
        if sep:
            out[key] = value
    return out
