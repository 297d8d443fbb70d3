import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sit_mlp.checkpoint import load_model
from sit_mlp.config import ModelConfig, TrainConfig, load_config
from sit_mlp.data import DatasetManifest, ManifestEntry
from sit_mlp.data.synthetic import synth_generate
from sit_mlp.errors import ConfigError, ContractError, DataError, TrainingError
from sit_mlp.evaluation import evaluate, load_sample_for_model, sample_attention
from sit_mlp.network import build_model
from sit_mlp.tensor_engine import Tensor
from sit_mlp.training import OptimizerState, cross_entropy, fit, lr_at, read_log, sgd_step


def param(values, name="w"):
    return name, Tensor(np.array(values, dtype=np.float64), requires_grad=True)


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig()
        assert lr_at(cfg, 0) == 0.0
        assert lr_at(cfg, 2.5) == pytest.approx(0.05)
        assert lr_at(cfg, 5) == 0.1
        assert lr_at(cfg, 90) == 1e-4

    def test_cosine_midpoint(self):
        cfg = TrainConfig()
        assert lr_at(cfg, 47.5) == pytest.approx((0.1 + 1e-4) / 2)

    def test_monotone_after_warmup(self):
        cfg = TrainConfig()
        values = [lr_at(cfg, e) for e in range(5, 91)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert all(1e-4 <= v <= 0.1 for v in values)

    def test_range_checked(self):
        with pytest.raises(ConfigError):
            lr_at(TrainConfig(), 91)
        with pytest.raises(ConfigError):
            lr_at(TrainConfig(), -1)

    def test_dense_grid(self):
        cfg = TrainConfig()
        grid = np.linspace(0, 90, 1001)
        values = np.array([lr_at(cfg, e) for e in grid])
        warm = grid <= 5
        assert_allclose(values[warm], 0.1 * grid[warm] / 5)
        assert np.all(np.diff(values[grid >= 5]) <= 0)
        eps = 1e-9
        assert lr_at(cfg, 5 - eps) == pytest.approx(lr_at(cfg, 5 + eps), abs=1e-8)

    def test_no_warmup(self):
        assert lr_at(TrainConfig(warmup_epochs=0, epochs=10), 0) == 0.1


class TestSgdStep:
    def test_zero_gradient_without_decay_is_noop(self):
        name, p = param([1.0, -2.0])
        sgd_step([(name, p)], {name: np.zeros(2)}, OptimizerState(), 0.1, TrainConfig(weight_decay=0.0))
        assert_array_equal(p.data, [1.0, -2.0])

    def test_plain_step(self):
        name, p = param([1.0])
        sgd_step([(name, p)], {name: np.ones(1)}, OptimizerState(), 0.1, TrainConfig(weight_decay=0.0))
        assert_allclose(p.data, [0.9])

    def test_momentum_accumulates(self):
        name, p = param([0.0])
        state = OptimizerState()
        cfg = TrainConfig(weight_decay=0.0, momentum=0.9)
        sgd_step([(name, p)], {name: np.ones(1)}, state, 0.1, cfg)
        sgd_step([(name, p)], {name: np.ones(1)}, state, 0.1, cfg)
        assert_allclose(p.data, [-0.1 - 0.19])
        assert state.steps == 2

    def test_decay_skips_norm_and_embedding(self):
        params = [param([1.0], "blocks.0.head.weight"), param([1.0], "norm.gamma"),
                  param([1.0], "norm.beta"), param([1.0], "embedding.pe")]
        grads = {name: np.zeros(1) for name, _ in params}
        sgd_step(params, grads, OptimizerState(), 0.1, TrainConfig(weight_decay=0.5, momentum=0.0))
        assert_allclose(params[0][1].data, [0.95])
        for _, p in params[1:]:
            assert_array_equal(p.data, [1.0])

    def test_reads_grad_attribute(self):
        name, p = param([1.0])
        p.grad = np.array([2.0])
        sgd_step([(name, p)], None, OptimizerState(), 0.1, TrainConfig(weight_decay=0.0))
        assert_allclose(p.data, [0.8])

    def test_missing_gradient(self):
        name, p = param([1.0])
        with pytest.raises(ContractError):
            sgd_step([(name, p)], None, OptimizerState(), 0.1, TrainConfig())

    def test_parameter_set_is_fixed(self):
        state = OptimizerState()
        a = param([1.0], "a")
        sgd_step([a], {"a": np.zeros(1)}, state, 0.1, TrainConfig())
        with pytest.raises(ContractError):
            sgd_step([param([1.0], "b")], {"b": np.zeros(1)}, state, 0.1, TrainConfig())


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
        assert loss.item() == pytest.approx(math.log(4))

    def test_labels_validated(self):
        with pytest.raises(DataError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(DataError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0.0, 1.0]))


class TestFit:
    def test_run_directory(self, micro_dataset, micro_cfg, quick_train_cfg, tmp_path):
        model = build_model(micro_cfg)
        result = fit(model, micro_dataset.train, quick_train_cfg, tmp_path / "run", quiet=True)
        run = tmp_path / "run"
        for name in ("config.toml", "log.csv", "best.ckpt", "final.ckpt"):
            assert (run / name).exists()
        assert load_config(run / "config.toml") == (micro_cfg, quick_train_cfg)

        header, rows = read_log(run / "log.csv")
        assert header["modality"] == "joint"
        assert header["variant"] == "full"
        assert header["train"]["epochs"] == 3
        assert [r.epoch for r in rows] == [1, 2, 3]
        assert [r.lr for r in rows] == [lr_at(quick_train_cfg, e) for e in (1, 2, 3)]
        assert [r.loss for r in rows] == [h.loss for h in result.history]
        assert result.best_loss == min(r.loss for r in rows)
        assert all(0.0 <= r.acc <= 1.0 for r in rows)

    def test_final_checkpoint_holds_trained_weights(self, micro_dataset, micro_cfg, quick_train_cfg, tmp_path):
        model = build_model(micro_cfg)
        fit(model, micro_dataset.train, quick_train_cfg, tmp_path, quiet=True)
        restored, ckpt = load_model(tmp_path / "final.ckpt")
        assert ckpt.meta["epoch"] == 3
        for (name, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items()):
            assert_array_equal(a.data, b.data, err_msg=name)

    def test_deterministic_per_seed(self, micro_dataset, micro_cfg, quick_train_cfg):
        a, b = build_model(micro_cfg), build_model(micro_cfg)
        ha = fit(a, micro_dataset.train, quick_train_cfg, quiet=True).history
        hb = fit(b, micro_dataset.train, quick_train_cfg, quiet=True).history
        assert [h.loss for h in ha] == [h.loss for h in hb]
        assert_array_equal(a.head.weight.data, b.head.weight.data)

    def test_training_reduces_loss(self, micro_dataset, micro_cfg):
        cfg = TrainConfig(epochs=8, warmup_epochs=1, batch_size=8, base_lr=0.05, end_lr=0.001)
        history = fit(build_model(micro_cfg), micro_dataset.train, cfg, quiet=True).history
        assert min(h.loss for h in history[-3:]) < history[0].loss

    def test_non_finite_loss(self, micro_dataset, micro_cfg, quick_train_cfg):
        model = build_model(micro_cfg)
        model.head.bias.data[...] = np.nan
        with pytest.raises(TrainingError):
            fit(model, micro_dataset.train, quick_train_cfg, quiet=True)

    def test_single_sample_batches_are_skipped(self, micro_dataset, micro_cfg):
        cfg = TrainConfig(epochs=2, warmup_epochs=0, batch_size=1)
        with pytest.raises(TrainingError):
            fit(build_model(micro_cfg), micro_dataset.train, cfg, quiet=True)
        tail = TrainConfig(epochs=2, warmup_epochs=0, batch_size=31)
        assert len(fit(build_model(micro_cfg), micro_dataset.train, tail, quiet=True).history) == 2

    def test_label_outside_model_classes(self, micro_cfg, quick_train_cfg):
        manifest = DatasetManifest([ManifestEntry("x.sits", 5)])
        with pytest.raises(DataError):
            fit(build_model(micro_cfg), manifest, quick_train_cfg, quiet=True)

    def test_bone_modality_recorded(self, micro_dataset, micro_cfg, quick_train_cfg, tmp_path):
        fit(build_model(micro_cfg), micro_dataset.train, quick_train_cfg, tmp_path, modality="bone", quiet=True)
        header, _ = read_log(tmp_path / "log.csv")
        assert header["modality"] == "bone"
        _, ckpt = load_model(tmp_path / "final.ckpt")
        assert ckpt.modality == "bone"


class TestAblationHarness:
    @pytest.mark.parametrize("flag", ["disable_specific", "disable_generic",
                                      "pool_temporal_attention", "pool_channel_attention"])
    def test_toggle_trains(self, micro_dataset, flag):
        cfg = ModelConfig.micro(**{flag: True})
        train = TrainConfig(epochs=5, warmup_epochs=1, batch_size=8, base_lr=0.05, end_lr=0.001)
        history = fit(build_model(cfg), micro_dataset.train, train, quiet=True).history
        assert len(history) == 5
        assert all(math.isfinite(h.loss) for h in history)

    def test_trained_attention_varies_point_wise(self, micro_dataset, micro_cfg):
        model = build_model(micro_cfg)
        # 13 epochs x 4 batches = 52 steps
        train = TrainConfig(epochs=13, warmup_epochs=1, batch_size=8, base_lr=0.05, end_lr=0.001)
        fit(model, micro_dataset.train, train, quiet=True)
        sample = load_sample_for_model(model, micro_dataset.test.resolve(micro_dataset.test.entries[0]))
        attention = sample_attention(model, sample)[0]
        assert np.ptp(attention, axis=0).max() > 0
        assert np.ptp(attention, axis=2).max() > 0

    def test_temporal_pooling_survives_training(self, micro_dataset):
        model = build_model(ModelConfig.micro(pool_temporal_attention=True))
        train = TrainConfig(epochs=5, warmup_epochs=1, batch_size=8, base_lr=0.05, end_lr=0.001)
        fit(model, micro_dataset.train, train, quiet=True)
        sample = load_sample_for_model(model, micro_dataset.test.resolve(micro_dataset.test.entries[0]))
        attention = sample_attention(model, sample)
        for t in range(1, attention.shape[1]):
            assert_array_equal(attention[:, t], attention[:, 0])


@pytest.mark.slow
class TestLearnability:
    def test_micro_model_overfits_small_set(self, tmp_path):
        data = synth_generate(tmp_path, num_classes=4, samples_per_class=10, joints=4, frames=8,
                              seed=2, test_fraction=0.2, quiet=True)
        assert len(data.train) == 32
        model = build_model(ModelConfig.micro(num_classes=4))
        train = TrainConfig(epochs=200, warmup_epochs=5, batch_size=8, base_lr=0.05, end_lr=0.0005)
        fit(model, data.train, train, quiet=True)
        assert evaluate(model, data.train).accuracy == 1.0

    def test_default_config_generalizes(self, tmp_path):
        data = synth_generate(tmp_path, num_classes=4, samples_per_class=100, seed=4, quiet=True)
        assert data.oracle_accuracy >= 0.8
        model = build_model(ModelConfig(num_classes=4))
        train = TrainConfig(epochs=20, warmup_epochs=2, batch_size=16, base_lr=0.05, end_lr=0.0005)
        fit(model, data.train, train, quiet=True)
        assert evaluate(model, data.test).accuracy >= 0.9
