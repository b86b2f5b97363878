"""Per-student input deformations: scheduled sampling and SpecAugment-style masking.

Both are pure functions of (student seed, epoch, batch index, utterance index),
so every student gets its own reproducible stream of perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .data import Batch
from .model import PAD, SOS
from ..utils.exceptions import ConfigError, ContractError
from ..utils.seeding import PURPOSE_SAMPLING, PURPOSE_SPEC_AUGMENT, derive_rng


class SamplingSchedule(BaseModel):
    """Linear ramp of the scheduled-sampling probability."""

    model_config = ConfigDict(extra="forbid")

    target_probability: float = Field(default=0.3, ge=0.0, le=1.0)
    ramp_epochs: int = Field(default=20, ge=1)


class SpecAugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_freq_masks: int = Field(default=2, ge=0)
    num_time_masks: int = Field(default=2, ge=0)
    max_freq_width: int = Field(default=20, ge=0)
    max_time_width: int = Field(default=100, ge=0)
    fill_value: float = 0.0

    @property
    def is_identity(self) -> bool:
        no_freq = self.num_freq_masks == 0 or self.max_freq_width == 0
        no_time = self.num_time_masks == 0 or self.max_time_width == 0
        return no_freq and no_time


def sampling_probability(epoch: int, schedule: SamplingSchedule) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return schedule.target_probability * min(1.0, epoch / schedule.ramp_epochs)


def scheduled_sample(
    reference: np.ndarray,
    predictions: np.ndarray,
    probability: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Replace reference tokens by aligned predictions with the given probability.

    Position 0 (SOS) is never replaced and PAD is never substituted in.
    """
    reference = np.asarray(reference, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if reference.shape != predictions.shape:
        raise ContractError(f"predictions {predictions.shape} are not aligned with reference {reference.shape}")
    if not 0.0 <= probability <= 1.0:
        raise ConfigError(f"sampling probability must be in [0, 1], got {probability}")
    replace = rng.random(reference.shape) < probability
    if replace.size:
        replace[0] = False
    replace &= predictions != PAD
    return np.where(replace, predictions, reference)


@dataclass(frozen=True)
class MaskPlacement:
    axis: Literal["freq", "time"]
    start: int
    width: int


def spec_augment(
    features: np.ndarray,
    config: SpecAugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[MaskPlacement]]:
    """Mask random frequency bands, then random time spans, of one [M×F] feature matrix."""
    out = np.array(features, dtype=np.float64, copy=True)
    num_frames, feature_dim = out.shape
    placements: list[MaskPlacement] = []
    plan = [("freq", config.num_freq_masks, config.max_freq_width, feature_dim)]
    plan.append(("time", config.num_time_masks, config.max_time_width, num_frames))
    for axis, count, max_width, extent in plan:
        for _ in range(count):
            width = min(int(rng.integers(0, max_width + 1)), extent)
            start = int(rng.integers(0, extent - width + 1))
            if axis == "freq":
                out[:, start:start + width] = config.fill_value
            else:
                out[start:start + width, :] = config.fill_value
            placements.append(MaskPlacement(axis, start, width))
    return out, placements


@dataclass(frozen=True)
class ScheduledSampler:
    """One student's scheduled-sampling stream."""

    probability: float
    seed: int

    def contexts(
        self,
        batch: Batch,
        predictions: np.ndarray,
        epoch: int,
        batch_index: int,
    ) -> np.ndarray:
        """Mixed decoder inputs for a batch.

        `predictions[b, n]` is the model's guess for the token following input
        position n, so it competes with the reference input at position n+1.
        """
        inputs = batch.decoder_inputs
        if predictions.shape != inputs.shape:
            raise ContractError(f"predictions {predictions.shape} do not match decoder inputs {inputs.shape}")
        aligned = np.concatenate([np.full((batch.size, 1), SOS, dtype=np.int64), predictions[:, :-1]], axis=1)
        mixed = inputs.copy()
        for u, length in enumerate(batch.token_lengths + 1):
            rng = derive_rng(self.seed, PURPOSE_SAMPLING, epoch, batch_index, u)
            mixed[u, :length] = scheduled_sample(inputs[u, :length], aligned[u, :length], self.probability, rng)
        return mixed


@dataclass(frozen=True)
class SpecAugmenter:
    """One student's feature-masking stream."""

    config: SpecAugmentConfig
    seed: int

    def deform(self, batch: Batch, epoch: int, batch_index: int) -> Batch:
        features = batch.features.copy()
        for u, length in enumerate(batch.frame_mask.sum(axis=1)):
            rng = derive_rng(self.seed, PURPOSE_SPEC_AUGMENT, epoch, batch_index, u)
            features[u, :length], _ = spec_augment(batch.features[u, :length], self.config, rng)
        return batch.with_features(features)
