import numpy as np
import pytest
import torch
from hypothesis import settings

from alanet.data import synth_generate
from alanet.network import ALANetConfig
from alanet.training import TrainConfig, run_training

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


def make_tiny_config(**overrides) -> ALANetConfig:
    """Desk-scale config: 128px inputs, 32px ROIs, narrow heads."""
    base = dict(
        backbone="tiny",
        backbone_channels=64,
        num_ranks=64,
        roi_box_size=32,
        anchor_sizes=(16, 32, 64),
        roi_head_channels=32,
        local_dim=64,
        gender_dim=8,
        mlp_hidden=64,
        input_long_side=128,
    )
    base.update(overrides)
    return ALANetConfig(**base)


def make_smoke_train_config(**overrides) -> TrainConfig:
    base = dict(
        iterations=20,
        batch_size=2,
        lr=1e-3,
        lr_decay_steps=(12, 16),
        seed=0,
        checkpoint_interval=10,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return make_tiny_config()


@pytest.fixture(scope="session")
def synth_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_train")
    return synth_generate(8, seed=0, out_dir=out, image_size=128, age_range=(8, 56))


@pytest.fixture(scope="session")
def trained_tiny(tmp_path_factory, synth_manifest):
    """A briefly trained full model; enough for exercising eval/predict paths."""
    out = tmp_path_factory.mktemp("smoke_run")
    torch.manual_seed(0)
    result = run_training(
        make_smoke_train_config(iterations=30, lr_decay_steps=(20, 25)),
        make_tiny_config(),
        synth_manifest,
        out,
    )
    return result
