import pytest

from sit_mlp.config import (
    AblationFlags,
    ModelConfig,
    TrainConfig,
    config_from_dict,
    dump_config,
    load_config,
    with_overrides,
)
from sit_mlp.errors import ConfigError


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.widths == [48, 96, 96, 192, 192]
        assert cfg.block_plan()[1] == (48, 96, 2)
        assert cfg.mstc_branches == 3

    @pytest.mark.parametrize("overrides", [
        {"variant": "cnn"},
        {"shared_init": "random"},
        {"dtype": "float16"},
        {"strides": (2, 1, 1, 2, 1)},
        {"strides": (1, 2, 1)},
        {"frames": 30},
        {"heads": 5},
        {"base_channels": 8},
        {"mstc_kernels": ((4, 1), (5, 2))},
        {"mstc_pool_kernel": 2},
        {"joints": 0},
        {"disable_specific": True, "disable_generic": True},
    ])
    def test_rejected(self, overrides):
        with pytest.raises(ConfigError):
            ModelConfig(**overrides)

    def test_variant_relaxes_width_rules(self):
        ModelConfig(variant="stgu_only", base_channels=16)
        ModelConfig(variant="mstc_only", base_channels=12, heads=5)

    def test_ablation_view(self):
        cfg = ModelConfig(pool_channel_attention=True)
        assert cfg.ablation == AblationFlags(pool_channel_attention=True)
        assert cfg.ablation.active() == ["pool_channel_attention"]


class TestTrainConfig:
    @pytest.mark.parametrize("overrides", [
        {"epochs": 0},
        {"warmup_epochs": 90},
        {"base_lr": 0.0001},
        {"momentum": 1.0},
        {"weight_decay": -1.0},
        {"batch_size": 0},
        {"workers": -1},
    ])
    def test_rejected(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides)


class TestToml:
    def test_dump_load_roundtrip(self, tmp_path):
        model = ModelConfig.micro(variant="stgu_only", shared_init="binary_graph")
        train = TrainConfig(epochs=7, base_lr=0.2)
        path = tmp_path / "c.toml"
        path.write_text(dump_config(model, train))
        assert load_config(path) == (model, train)

    def test_bare_keys_are_model_keys(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('joints = 4\nframes = 8\nbase_channels = 6\nheads = 2\n[train]\nepochs = 3\n')
        model, train = load_config(path)
        assert (model.joints, model.base_channels, train.epochs) == (4, 6, 3)

    def test_unknown_keys_and_tables(self):
        with pytest.raises(ConfigError):
            config_from_dict({"model": {"depth": 3}})
        with pytest.raises(ConfigError):
            config_from_dict({"optimizer": {"lr": 0.1}})

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[model\n")
        with pytest.raises(ConfigError):
            load_config(path)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.toml")

    def test_overrides_skip_unset(self):
        cfg = TrainConfig()
        assert with_overrides(cfg, epochs=None) is cfg
        assert with_overrides(cfg, epochs=4, seed=None).epochs == 4
