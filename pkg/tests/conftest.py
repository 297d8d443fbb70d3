import numpy as np
import pytest

from sit_mlp.config import ModelConfig, TrainConfig
from sit_mlp.data.synthetic import synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    return ModelConfig.micro()


@pytest.fixture
def quick_train_cfg():
    return TrainConfig(epochs=3, warmup_epochs=1, batch_size=8, base_lr=0.05, end_lr=0.001)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """2 classes x 20 samples on a 4-joint tree, 8 frames: fits ModelConfig.micro()"""
    root = tmp_path_factory.mktemp("micro_data")
    return synth_generate(root, num_classes=2, samples_per_class=20, joints=4, frames=8, seed=0, quiet=True)
