from types import SimpleNamespace

import pytest
import yaml
from click.testing import CliRunner


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def settings_factory(tmp_path):
    def _make(**overrides):
        output_dir = overrides.pop("output_dir", tmp_path / "output")
        output_dir.mkdir(parents=True, exist_ok=True)

        base = {
            "output_dir": output_dir,
            "workers": 1,
            "log_level": "INFO",
        }
        base.update(overrides)
        return SimpleNamespace(**base)

    return _make


@pytest.fixture
def tiny_config_file(tmp_path):
    """Write a YAML run config small enough to train in seconds."""

    def _write(**extra):
        model = {
            "num_encoder_blocks": 1,
            "num_decoder_blocks": 1,
            "model_dim": 8,
            "ffn_dim": 16,
            "num_heads": 2,
            "dropout_rate": 0.0,
            "max_positions": 64,
        }
        raw = {
            "seed": 1,
            "task": {
                "vocab_size": 6, "feature_dim": 4, "noise_std": 0.3, "min_tokens": 1, "max_tokens": 3,
                "train_size": 8, "valid_size": 4, "test_size": 4, "seed": 3,
            },
            "models": {"large": model, "compact": {**model, "ffn_dim": 8}},
            "trainer": {"batch_size": 4, "max_epochs": 1, "warmup_steps": 2},
            "decode": {"beam": 2},
            "gradcheck": {"max_elements_per_tensor": 2, "objectives": ["mle", "dml"]},
        }
        raw.update(extra)
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(raw), encoding="utf-8")
        return path

    return _write
