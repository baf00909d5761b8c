import pytest
import torch

from declvqa.encoder import EncoderConfig
from declvqa.pretrain import PretrainConfig, pretrain
from declvqa.world import WorldConfig, build_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_world():
    return WorldConfig(seed=11)


@pytest.fixture(scope="session")
def small_dataset(small_world):
    return build_dataset(small_world, {"train": 160, "val": 40, "test": 40})


@pytest.fixture(scope="session")
def tiny_pretrained(small_dataset):
    """A briefly pre-trained model for integration-level tests."""
    cfg = PretrainConfig(steps=60, batch_size=32, log_every=30, seed=1)
    model, log = pretrain(small_dataset, EncoderConfig(), cfg)
    return model, log
