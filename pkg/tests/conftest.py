"""Pytest fixtures for testing."""

import numpy as np
import pytest

from h2dilr.models.config import RunConfig
from h2dilr.services.synthdata import generate_dataset

# T=64 -> stem 32 -> pools 16, 8, 4: four tokens per segment.
TINY = {
    "data": {"channels": [4, 6], "segment_length": 64, "samples_per_class": 5},
    "model": {
        "stem_channels": 6,
        "stage_channels": [8, 8, 8],
        "embed_dim": 8,
        "ffn_dim": 16,
        "blocks": 1,
        "heads": 2,
        "patch_kernel": 2,
        "patch_stride": 2,
        "dropout": 0.0,
    },
    "h2d": {"k_private": 3, "code_dim": 4},
    "train": {
        "pretrain_epochs": 1,
        "decoder_epochs": 2,
        "batch_size": 8,
        "pretrain_lr": 1e-3,
        "decoder_lr": 1e-3,
        "seeds": [0],
    },
}

TINY_FILE = """\
# tiny run
data.channels=4,6
data.segment_length=64
data.samples_per_class=5
model.stem_channels=6
model.stage_channels=8,8,8
model.embed_dim=8
model.ffn_dim=16
model.blocks=1
model.heads=2
model.patch_kernel=2
model.patch_stride=2
h2d.K_private=3
h2d.code_dim=4
train.pretrain_epochs=1
train.decoder_epochs=1
train.batch_size=8
train.seeds=0
"""


@pytest.fixture
def tiny_config() -> RunConfig:
    """Two subjects, four tokens per segment, small widths."""
    return RunConfig.model_validate(TINY)


@pytest.fixture
def tiny_datasets(tiny_config):
    """Twenty samples per subject from the tiny spec."""
    return generate_dataset(tiny_config.gen_spec())


@pytest.fixture
def config_file(tmp_path):
    """Flat run-config file for the tiny setup, writing under tmp_path/run."""
    path = tmp_path / "run.cfg"
    path.write_text(TINY_FILE + f"out_dir={tmp_path / 'run'}\n")
    return path


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)
