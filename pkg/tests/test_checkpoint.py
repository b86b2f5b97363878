"""Tests for checkpoint files."""

import pytest

from src.modules.checkpoint import (
    CHECKPOINT_MAGIC,
    CheckpointMeta,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from src.utils.exceptions import CheckpointError


@pytest.fixture
def meta(tiny_model_config):
    return CheckpointMeta(
        model=tiny_model_config,
        student=1,
        model_name="large",
        epoch=3,
        step=42,
        valid_loss=1.25,
        feature_mean=[0.0, 0.5, -0.5, 1.0],
        feature_std=[1.0, 2.0, 1.0, 0.5],
    )


def test_save_then_load_restores_parameters_and_meta(tmp_path, tiny_params, meta):
    path = save_checkpoint(tmp_path / "student1" / "best.ckpt", tiny_params, meta)
    params, loaded = load_checkpoint(path)

    assert params.equals(tiny_params)
    assert loaded == meta
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)
    assert not path.with_suffix(".ckpt.tmp").exists()


def test_encoding_is_deterministic(tiny_params, meta):
    assert encode_checkpoint(tiny_params, meta) == encode_checkpoint(tiny_params.copy(), meta)


def test_bad_magic_is_rejected(tiny_params, meta):
    blob = encode_checkpoint(tiny_params, meta)
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXXXXXX" + blob[8:])


def test_truncated_checkpoint_is_rejected(tiny_params, meta):
    blob = encode_checkpoint(tiny_params, meta)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-1])


def test_trailing_bytes_are_rejected(tiny_params, meta):
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(encode_checkpoint(tiny_params, meta) + b"\x00")


def test_shape_mismatch_with_config_is_rejected(tiny_params, meta):
    other = meta.model_copy(update={"model": meta.model.model_copy(update={"vocab_size": 7})})
    with pytest.raises(CheckpointError):
        decode_checkpoint(encode_checkpoint(tiny_params, other))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")
