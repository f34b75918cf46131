import csv
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from dataset import Dataset, Sample
from diff_engine import ParamSet
from errors import ArgumentError, ConfigError, ContractError, NumericFaultError
from graphnet import EngineKind, GraphEngine, NetworkConfig
from losses import deformation_loss
from print_oracle import OraclePredictor, simulate_print
from trainer import (
    AdamState,
    TrainingConfig,
    adam_step,
    iterate_loop,
    train_compensator,
    train_predictor,
    write_loss_curve,
)

NETWORK = NetworkConfig(layer_widths=(8, 8))


@pytest.fixture
def box_dataset(box_graph, noiseless_warp) -> Dataset:
    """Two copies of the box, the second shifted along y; both printed without noise."""
    samples = []
    for index, shift in enumerate((0.0, 30.0)):
        graph = box_graph.with_vertices(box_graph.vertices + np.array([0.0, shift, 0.0]))
        cad = graph.cloud()
        samples.append(Sample(f"part_{index:03d}", graph, cad, simulate_print(cad, noiseless_warp)))
    return Dataset(tuple(samples), ("part_000",), ("part_001",))


@pytest.fixture
def quick_config() -> TrainingConfig:
    return TrainingConfig(learning_rate=1e-2, epochs=30, log_every=0)


class TestTrainingConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"learning_rate": 0.0}, {"epochs": 0}, {"beta1": 1.0}, {"batch_size": 0}, {"checkpoint_every": -1}],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            TrainingConfig(**kwargs)


class TestAdamStep:
    def test_first_step_moves_by_the_learning_rate(self):
        params = ParamSet({"w": np.array([1.0, 2.0])})
        config = TrainingConfig(learning_rate=0.1)
        updated, state = adam_step(params, {"w": np.array([0.5, -3.0])}, AdamState.zeros(params), config)
        np.testing.assert_allclose(updated["w"], [0.9, 2.1], rtol=1e-6)
        assert state.step == 1
        np.testing.assert_allclose(state.first["w"], [0.05, -0.3])

    def test_frozen_params(self):
        params = ParamSet({"w": np.ones(2)}).freeze()
        with pytest.raises(ContractError):
            adam_step(params, {"w": np.ones(2)}, AdamState.zeros(params), TrainingConfig())

    def test_non_finite_gradient(self):
        params = ParamSet({"w": np.ones(2)})
        with pytest.raises(NumericFaultError) as exc:
            adam_step(params, {"w": np.array([np.inf, 0.0])}, AdamState.zeros(params), TrainingConfig())
        assert exc.value.last_good is params

    def test_gradient_shape(self):
        params = ParamSet({"w": np.ones(2)})
        with pytest.raises(ArgumentError):
            adam_step(params, {"w": np.ones(3)}, AdamState.zeros(params), TrainingConfig())

    def test_zero_gradient_is_a_fixed_point(self):
        params = ParamSet({"w": np.array([[0.3, -1.2], [4.0, 0.0]]), "b": np.array([2.5])})
        state = AdamState.zeros(params)
        zeros = {name: np.zeros_like(values) for name, values in params.items()}
        current = params
        for _ in range(5):
            current, state = adam_step(current, zeros, state, TrainingConfig(learning_rate=0.5))
        assert current.checksum() == params.checksum()
        assert state.step == 5


class TestTrainPredictor:
    def test_loss_goes_down(self, box_dataset, quick_config, chamber):
        result = train_predictor(box_dataset, quick_config, NETWORK, chamber)
        assert len(result.history) == quick_config.epochs + 1
        assert result.final_total < result.initial_total
        assert result.best_loss <= result.history[0].validation_total
        assert result.engine.kind is EngineKind.PREDICTOR

    def test_seeded_runs_are_identical(self, box_dataset, chamber):
        config = TrainingConfig(learning_rate=1e-2, epochs=3, log_every=0)
        a = train_predictor(box_dataset, config, NETWORK, chamber)
        b = train_predictor(box_dataset, config, NETWORK, chamber)
        assert a.engine.checksum() == b.engine.checksum()

    def test_checkpoints(self, tmp_path, box_dataset, chamber):
        config = TrainingConfig(epochs=4, checkpoint_every=2, checkpoint_dir=tmp_path, log_every=0)
        train_predictor(box_dataset, config, NETWORK, chamber)
        names = sorted(p.name for p in tmp_path.glob("*.wcp"))
        assert names == ["predictor_0_0.wcp", "predictor_0_2.wcp", "predictor_0_best.wcp"]
        GraphEngine.load(tmp_path / "predictor_0_best.wcp")

    def test_mini_batches(self, box_graph, noiseless_warp, chamber):
        samples = []
        for index in range(3):
            graph = box_graph.with_vertices(box_graph.vertices + np.array([0.0, 20.0 * index, 0.0]))
            samples.append(Sample(f"p{index}", graph, graph.cloud(), simulate_print(graph.cloud(), noiseless_warp)))
        dataset = Dataset(tuple(samples), ("p0", "p1", "p2"))
        config = TrainingConfig(epochs=2, batch_size=2, log_every=0)
        result = train_predictor(dataset, config, NETWORK, chamber)
        assert [r.epoch for r in result.history] == [0, 1, 2]
        assert all(r.validation_total is None for r in result.history)

    def test_numeric_fault_keeps_the_last_good_engine(self, mocker, tmp_path, box_dataset, chamber):
        mocker.patch("trainer.adam_step", side_effect=NumericFaultError("gradient overflow"))
        config = TrainingConfig(epochs=2, checkpoint_dir=tmp_path, log_every=0)
        with pytest.raises(NumericFaultError) as exc:
            train_predictor(box_dataset, config, NETWORK, chamber)
        assert isinstance(exc.value.last_good, GraphEngine)
        assert (tmp_path / "predictor_0_lastgood.wcp").exists()


class TestTrainCompensator:
    def test_against_the_oracle(self, box_dataset, quick_config, noiseless_warp):
        oracle = OraclePredictor(noiseless_warp)
        result = train_compensator(box_dataset, oracle, quick_config, NETWORK)
        assert result.final_total < result.initial_total
        assert result.engine.kind is EngineKind.COMPENSATOR

    def test_requires_a_frozen_predictor(self, box_dataset, quick_config, chamber):
        predictor = GraphEngine.initialize(EngineKind.PREDICTOR, NETWORK, chamber)
        with pytest.raises(ContractError):
            train_compensator(box_dataset, predictor, quick_config, NETWORK)

    def test_initial_loss_scores_the_uncompensated_cad(self, box_dataset, quick_config, noiseless_warp):
        oracle = OraclePredictor(noiseless_warp)
        result = train_compensator(box_dataset, oracle, quick_config, NETWORK)
        (sample,) = box_dataset.train()
        expected = deformation_loss(oracle.forward(sample.cad, sample.graph), sample.cad)
        assert result.history[0].total == pytest.approx(expected.total, rel=1e-9)
        assert result.history[0].l2 == pytest.approx(expected.l2, rel=1e-9)

    def test_predictor_is_untouched(self, box_dataset, chamber):
        config = TrainingConfig(epochs=3, log_every=0)
        predictor = train_predictor(box_dataset, config, NETWORK, chamber).engine.freeze()
        before = predictor.checksum()
        train_compensator(box_dataset, predictor, config, NETWORK)
        assert predictor.checksum() == before


class TestIterateLoop:
    def test_rounds_with_augmentation(self, box_dataset, noiseless_warp, chamber):
        config = TrainingConfig(learning_rate=1e-2, epochs=3, log_every=0)
        rounds = iterate_loop(box_dataset, config, 2, noiseless_warp, augment=True, network=NETWORK, chamber=chamber)
        assert [r.round_index for r in rounds] == [0, 1]
        assert rounds[0].dataset_hash == box_dataset.content_hash()
        assert rounds[1].dataset_hash != rounds[0].dataset_hash

    def test_without_augmentation_the_dataset_is_fixed(self, box_dataset, chamber):
        config = TrainingConfig(epochs=2, log_every=0)
        rounds = iterate_loop(box_dataset, config, 2, network=NETWORK, chamber=chamber)
        assert rounds[0].dataset_hash == rounds[1].dataset_hash

    def test_repeated_rounds_are_bit_identical(self, box_dataset, chamber):
        config = TrainingConfig(epochs=2, log_every=0)
        first, second = iterate_loop(box_dataset, config, 2, network=NETWORK, chamber=chamber)
        assert second.predictor.engine.checksum() == first.predictor.engine.checksum()
        assert second.compensator.engine.checksum() == first.compensator.engine.checksum()
        assert [r.total for r in second.compensator.history] == [r.total for r in first.compensator.history]

    def test_one_round_is_both_stages_once(self, box_dataset, chamber):
        config = TrainingConfig(epochs=2, log_every=0)
        (only,) = iterate_loop(box_dataset, config, 1, network=NETWORK, chamber=chamber)
        predictor = train_predictor(box_dataset, config, NETWORK, chamber)
        compensator = train_compensator(box_dataset, predictor.engine.freeze(), config, NETWORK, chamber)
        assert only.predictor.engine.checksum() == predictor.engine.checksum()
        assert only.compensator.engine.checksum() == compensator.engine.checksum()

    def test_bad_arguments(self, box_dataset):
        with pytest.raises(ArgumentError):
            iterate_loop(box_dataset, TrainingConfig(), 0)
        with pytest.raises(ArgumentError):
            iterate_loop(box_dataset, TrainingConfig(), 2, augment=True)


class TestLossCurve:
    def test_csv(self, tmp_path, box_dataset, chamber):
        result = train_predictor(box_dataset, TrainingConfig(epochs=2, log_every=0), NETWORK, chamber)
        write_loss_curve(result.history, tmp_path / "loss.csv")
        with open(tmp_path / "loss.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["epoch", "l2", "chamfer", "total", "validation_total"]
        assert len(rows) == 4
        assert rows[1][0] == "0" and rows[1][4] != ""
