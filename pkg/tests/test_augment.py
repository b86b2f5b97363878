"""Tests for scheduled sampling and feature masking."""

import numpy as np
import pytest
from pydantic import ValidationError

from src.modules.augment import (
    SamplingSchedule,
    ScheduledSampler,
    SpecAugmentConfig,
    SpecAugmenter,
    sampling_probability,
    scheduled_sample,
    spec_augment,
)
from src.modules.data import collate
from src.modules.model import PAD, SOS
from src.utils.exceptions import ContractError


@pytest.mark.parametrize("epoch", [0, 1, 7, 19, 20, 21, 100])
def test_sampling_probability_ramp(epoch):
    schedule = SamplingSchedule(target_probability=0.3, ramp_epochs=20)
    assert sampling_probability(epoch, schedule) == 0.3 * min(1.0, epoch / 20)


def test_sampling_probability_rejects_negative_epoch():
    with pytest.raises(ContractError):
        sampling_probability(-1, SamplingSchedule())


def test_schedule_validates_probability():
    with pytest.raises(ValidationError):
        SamplingSchedule(target_probability=1.5)


def test_scheduled_sample_extremes():
    reference = np.array([SOS, 3, 4, 5, 6])
    predictions = np.array([SOS, 7, 7, 7, 7])
    rng = np.random.default_rng(0)
    assert np.array_equal(scheduled_sample(reference, predictions, 0.0, rng), reference)
    assert np.array_equal(scheduled_sample(reference, predictions, 1.0, rng), [SOS, 7, 7, 7, 7])


def test_scheduled_sample_never_touches_first_position_or_inserts_pad():
    reference = np.array([SOS, 3, 4, 5])
    predictions = np.array([9, PAD, 8, PAD])
    mixed = scheduled_sample(reference, predictions, 1.0, np.random.default_rng(0))
    assert mixed.tolist() == [SOS, 3, 8, 5]


def test_scheduled_sample_rejects_misaligned_predictions():
    with pytest.raises(ContractError):
        scheduled_sample(np.array([SOS, 3]), np.array([3]), 0.5, np.random.default_rng(0))


def test_scheduled_sample_rate_is_close_to_probability():
    reference = np.full(20001, 3)
    predictions = np.full(20001, 4)
    mixed = scheduled_sample(reference, predictions, 0.3, np.random.default_rng(1))
    assert (mixed[1:] == 4).mean() == pytest.approx(0.3, abs=0.02)


def test_spec_augment_zero_width_is_identity():
    features = np.random.default_rng(0).standard_normal((30, 8))
    config = SpecAugmentConfig(max_freq_width=0, max_time_width=0)
    out, placements = spec_augment(features, config, np.random.default_rng(0))
    assert np.array_equal(out, features)
    assert len(placements) == 4
    assert all(p.width == 0 for p in placements)


def test_spec_augment_masks_stay_in_bounds():
    features = np.ones((12, 6))
    config = SpecAugmentConfig(num_freq_masks=2, num_time_masks=3, max_freq_width=4, max_time_width=50, fill_value=0.0)
    out, placements = spec_augment(features, config, np.random.default_rng(3))

    assert [p.axis for p in placements] == ["freq", "freq", "time", "time", "time"]
    masked = np.ones_like(features, dtype=bool)
    for p in placements:
        extent = 6 if p.axis == "freq" else 12
        assert 0 <= p.start and p.start + p.width <= extent
        if p.axis == "freq":
            masked[:, p.start:p.start + p.width] = False
        else:
            masked[p.start:p.start + p.width, :] = False
    assert np.array_equal(out == 1.0, masked)
    assert np.array_equal(features, np.ones((12, 6)))


def test_spec_augment_contract_over_many_deformations():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        frames, dim = int(rng.integers(1, 40)), int(rng.integers(1, 12))
        config = SpecAugmentConfig(
            num_freq_masks=int(rng.integers(0, 4)),
            num_time_masks=int(rng.integers(0, 4)),
            max_freq_width=int(rng.integers(0, 15)),
            max_time_width=int(rng.integers(0, 50)),
            fill_value=-7.0,
        )
        features = rng.standard_normal((frames, dim))
        original = features.copy()
        out, placements = spec_augment(features, config, rng)

        assert out.shape == features.shape
        assert np.array_equal(features, original)
        assert len(placements) == config.num_freq_masks + config.num_time_masks
        covered = np.zeros_like(features, dtype=bool)
        for p in placements:
            extent, limit = (dim, config.max_freq_width) if p.axis == "freq" else (frames, config.max_time_width)
            assert 0 <= p.width <= min(limit, extent)
            assert 0 <= p.start <= extent - p.width
            if p.axis == "freq":
                covered[:, p.start:p.start + p.width] = True
            else:
                covered[p.start:p.start + p.width, :] = True
        assert np.all(out[covered] == -7.0)
        assert np.array_equal(out[~covered], features[~covered])


def test_augmenters_are_per_student_and_reproducible(tiny_task):
    batch = collate(tiny_task.train.utterances[:4])
    config = SpecAugmentConfig(num_freq_masks=1, num_time_masks=1, max_freq_width=2, max_time_width=3)
    a = SpecAugmenter(config, seed=1).deform(batch, epoch=0, batch_index=0)
    again = SpecAugmenter(config, seed=1).deform(batch, epoch=0, batch_index=0)
    b = SpecAugmenter(config, seed=2).deform(batch, epoch=0, batch_index=0)

    assert np.array_equal(a.features, again.features)
    assert not np.array_equal(a.features, b.features)
    assert (a.features[~batch.frame_mask] == 0).all()


def test_sampler_contexts_keep_sos_and_padding(tiny_task):
    batch = collate(tiny_task.train.utterances[:4])
    predictions = np.full(batch.decoder_inputs.shape, 5)
    mixed = ScheduledSampler(1.0, seed=0).contexts(batch, predictions, epoch=3, batch_index=0)

    assert (mixed[:, 0] == SOS).all()
    for i, n in enumerate(batch.token_lengths):
        assert (mixed[i, 1:n + 1] == 5).all()
        assert (mixed[i, n + 1:] == PAD).all()
