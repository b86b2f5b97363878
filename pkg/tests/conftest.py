import os

import numpy as np
import pytest

os.environ.setdefault("DMLSEQ_LOG_FILE", "")
os.environ.setdefault("DMLSEQ_LOG_STREAM", "0")

from src.modules.data import SyntheticTaskConfig, generate_task  # noqa: E402
from src.modules.model import ModelConfig, ModelParams  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiments, run with DMLSEQ_RUN_SLOW=1")


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        num_encoder_blocks=1,
        num_decoder_blocks=1,
        model_dim=8,
        ffn_dim=16,
        num_heads=2,
        vocab_size=6,
        feature_dim=4,
        dropout_rate=0.0,
        max_positions=64,
    )


@pytest.fixture
def tiny_params(tiny_model_config) -> ModelParams:
    return ModelParams.initialize(tiny_model_config, np.random.default_rng(0))


@pytest.fixture
def tiny_task_config() -> SyntheticTaskConfig:
    return SyntheticTaskConfig(
        vocab_size=6,
        feature_dim=4,
        frames_per_token=4,
        noise_std=0.3,
        min_tokens=1,
        max_tokens=3,
        train_size=8,
        valid_size=4,
        test_size=4,
        seed=3,
    )


@pytest.fixture
def tiny_task(tiny_task_config):
    return generate_task(tiny_task_config)
