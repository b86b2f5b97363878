"""Tests for synthetic tasks, corpus files and batching."""

import numpy as np
import pytest
from pydantic import ValidationError

from src.modules.data import (
    CORPUS_MAGIC,
    Corpus,
    FeatureStandardizer,
    SyntheticTaskConfig,
    collate,
    decode_corpus,
    encode_corpus,
    expected_prototype_accuracy,
    generate_task,
    make_batches,
    nearest_prototype_accuracy,
    read_corpus,
    write_corpus,
)
from src.modules.model import EOS, NUM_SPECIAL, PAD, SOS
from src.utils.exceptions import ConfigError, CorpusParseError


def test_vocab_below_four_is_rejected():
    with pytest.raises(ValidationError):
        SyntheticTaskConfig(vocab_size=3)


def test_min_tokens_above_max_is_rejected():
    with pytest.raises(ValidationError):
        SyntheticTaskConfig(min_tokens=5, max_tokens=2)


def test_generate_task_sizes_and_ranges(tiny_task, tiny_task_config):
    assert list(tiny_task.corpora) == ["train", "valid", "test1"]
    assert [len(c) for c in tiny_task.corpora.values()] == [8, 4, 4]
    for corpus in tiny_task.corpora.values():
        for utt in corpus:
            n = len(utt.tokens)
            assert tiny_task_config.min_tokens <= n <= tiny_task_config.max_tokens
            assert utt.tokens.min() >= NUM_SPECIAL
            assert utt.tokens.max() < tiny_task_config.vocab_size
            assert utt.features.shape == (n * tiny_task_config.frames_per_token, tiny_task_config.feature_dim)


def test_same_seed_same_task(tiny_task_config):
    a = generate_task(tiny_task_config)
    b = generate_task(tiny_task_config)
    c = generate_task(tiny_task_config.model_copy(update={"seed": 4}))
    assert all(a.corpora[n].equals(b.corpora[n]) for n in a.corpora)
    assert not a.train.equals(c.train)


def test_multiple_test_sets_are_independent(tiny_task_config):
    task = generate_task(tiny_task_config.model_copy(update={"num_test_sets": 3}))
    assert [c.name for c in task.tests] == ["test1", "test2", "test3"]
    assert not task.tests[0].equals(task.tests[1])


def test_noiseless_frames_equal_prototypes(tiny_task_config):
    task = generate_task(tiny_task_config.model_copy(update={"noise_std": 0.0}))
    utt = task.train.utterances[0]
    expected = np.repeat(task.prototypes[utt.tokens], tiny_task_config.frames_per_token, axis=0)
    assert np.array_equal(utt.features, expected)


def test_prototype_classifier_matches_gaussian_estimate():
    cfg = SyntheticTaskConfig(vocab_size=16, feature_dim=8, noise_std=0.5, train_size=300, valid_size=0, test_size=0, seed=1)
    task = generate_task(cfg)
    measured = nearest_prototype_accuracy(task.train, task.prototypes, cfg.frames_per_token)
    assert measured == pytest.approx(expected_prototype_accuracy(task.prototypes, cfg.noise_std), abs=0.02)


def test_corpus_file_roundtrip_is_byte_exact(tmp_path, tiny_task):
    path = write_corpus(tiny_task.train, tmp_path / "train.corpus")
    loaded = read_corpus(path)
    assert loaded.equals(tiny_task.train)
    assert loaded.task == tiny_task.train.task
    assert encode_corpus(loaded) == path.read_bytes()


def test_empty_corpus_file_is_valid(tmp_path):
    path = tmp_path / "empty.corpus"
    path.write_bytes(b"")
    corpus = read_corpus(path)
    assert len(corpus) == 0
    assert corpus.name == "empty"

    header_only = encode_corpus(Corpus("none", 4, []))
    assert len(decode_corpus(header_only)) == 0


def test_truncated_corpus_reports_offset(tiny_task):
    blob = encode_corpus(tiny_task.train)
    with pytest.raises(CorpusParseError) as exc:
        decode_corpus(blob[:-5])
    assert 0 < exc.value.offset < len(blob)


def test_bad_magic_reports_offset_zero():
    with pytest.raises(CorpusParseError) as exc:
        decode_corpus(b"NOTACORP" + b"\x00" * 16)
    assert exc.value.offset == 0
    assert CORPUS_MAGIC != b"NOTACORP"


def test_collate_builds_targets_with_eos(tiny_task):
    batch = collate(tiny_task.train.utterances[:3])
    lengths = [len(u.tokens) for u in tiny_task.train.utterances[:3]]

    assert batch.decoder_inputs[:, 0].tolist() == [SOS] * 3
    for i, n in enumerate(lengths):
        assert batch.targets[i, n] == EOS
        assert (batch.targets[i, n + 1:] == PAD).all()
        assert batch.target_mask[i].sum() == n + 1
        assert np.array_equal(batch.decoder_inputs[i, 1:n + 1], batch.targets[i, :n])
        assert batch.frame_mask[i].sum() == tiny_task.train.utterances[i].num_frames


def test_make_batches_sizes_and_shuffle(tiny_task_config):
    task = generate_task(tiny_task_config.model_copy(update={"train_size": 10}))
    batches = make_batches(task.train, 3)
    assert [b.size for b in batches] == [3, 3, 3, 1]

    first = [b.uids for b in make_batches(task.train, 3, shuffle_seed=5, epoch=0)]
    again = [b.uids for b in make_batches(task.train, 3, shuffle_seed=5, epoch=0)]
    other = [b.uids for b in make_batches(task.train, 3, shuffle_seed=5, epoch=1)]
    assert first == again
    assert first != other
    assert sorted(uid for b in first for uid in b) == sorted(u.uid for u in task.train)


def test_make_batches_rejects_empty_corpus():
    with pytest.raises(ConfigError):
        make_batches(Corpus("empty", 4, []), 2)


def test_standardizer_fits_train_statistics(tiny_task):
    standardizer = FeatureStandardizer.fit(tiny_task.train)
    frames = np.concatenate([u.features for u in standardizer.apply(tiny_task.train)])
    assert np.allclose(frames.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(frames.std(axis=0), 1.0)
