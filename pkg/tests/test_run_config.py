import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from errors import ConfigError
from run_config import (
    DEFAULTS,
    PACKAGE_VERSION,
    RunConfig,
    file_sha256,
    parse_config_text,
    parse_value,
    read_manifest,
    write_manifest,
)


class TestParseValue:
    @pytest.mark.parametrize(
        "text, expected",
        [("3", 3), ("0.25", 0.25), ("1e-3", 1e-3), ("true", True), ("null", None), ("[64, 32]", [64, 32])],
    )
    def test_types(self, text, expected):
        assert parse_value(text) == expected

    def test_malformed_yaml(self):
        with pytest.raises(ConfigError):
            parse_value("[1, 2")


class TestParseConfigText:
    def test_comments_and_blank_lines(self):
        text = "# warp settings\n\nwarp.noise = 0.0  # noiseless\ntrain.epochs=50\n"
        assert parse_config_text(text) == {"warp.noise": 0.0, "train.epochs": 50}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'warp.colour'"):
            parse_config_text("warp.colour = red\n", "run.cfg")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="run.cfg:2"):
            parse_config_text("train.epochs = 5\ntrain.epochs\n", "run.cfg")


class TestRunConfig:
    def test_defaults(self):
        config = RunConfig()
        assert config["train.epochs"] == DEFAULTS["train.epochs"]
        assert config.network().layer_widths == (64, 64, 64, 64)

    def test_file_then_overrides(self, tmp_path):
        (tmp_path / "run.cfg").write_text("warp.noise = 0.0\ntrain.epochs = 50\n")
        config = RunConfig.load(tmp_path / "run.cfg").override(train__epochs=7, warp__amplitude=None)
        assert config["warp.noise"] == 0.0
        assert config["train.epochs"] == 7
        assert config["warp.amplitude"] == 1.0

    def test_override_rejects_unknown(self):
        with pytest.raises(ConfigError):
            RunConfig().override(warp__colour="red")

    def test_typed_builders(self):
        config = RunConfig(
            {
                "chamber.max": [200.0, 200.0, 200.0],
                "net.layer_widths": 16,
                "net.position_aware": False,
                "train.batch_size": 4,
                "loss.chamfer_weight": 0.5,
            }
        )
        warp = config.warp(seed=9)
        assert warp.seed == 9
        np.testing.assert_array_equal(warp.chamber.max_corner, [200.0, 200.0, 200.0])
        network = config.network()
        assert network.layer_widths == (16,) and not network.position_aware
        training = config.training(seed=2)
        assert training.batch_size == 4
        assert training.loss_weights.chamfer == 0.5

    def test_bad_number(self):
        with pytest.raises(ConfigError):
            RunConfig({"warp.noise": "lots"}).warp(seed=0)

    def test_bad_chamber(self):
        with pytest.raises(ConfigError):
            RunConfig({"chamber.min": [0.0, 0.0]}).chamber()


class TestManifest:
    def test_write_read(self, tmp_path):
        write_manifest(tmp_path / "manifest.txt", {"seed": 3, "config.warp.noise": 0.0})
        text = (tmp_path / "manifest.txt").read_text()
        assert text.splitlines()[0] == f"version={PACKAGE_VERSION}"
        assert read_manifest(tmp_path / "manifest.txt") == {
            "version": PACKAGE_VERSION,
            "seed": "3",
            "config.warp.noise": "0.0",
        }

    def test_file_sha256(self, tmp_path):
        (tmp_path / "a.txt").write_bytes(b"abc")
        assert file_sha256(tmp_path / "a.txt") == (
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )
