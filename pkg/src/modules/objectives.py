"""Training objectives for a cohort of students.

Every loss is a token-mean soft cross-entropy `-Σ q·log p / T` over the valid
target positions, where q is a one-hot truth, a smoothed truth, a frozen peer
distribution or a frozen teacher distribution. Sharing one reduction keeps the
degenerate cases (λ=0, α=0, p=0) exactly equal to plain MLE.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import numcore as nc
from .augment import ScheduledSampler, SpecAugmenter
from .data import Batch
from .model import Seq2SeqTransformer
from .numcore import Tensor
from ..utils.exceptions import ConfigError, ContractError, DimensionError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class ClampCounter:
    """Counts probabilities floored before taking a log."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int) -> None:
        if n:
            with self._lock:
                self._count += n

    @property
    def value(self) -> int:
        return self._count

    def reset(self) -> int:
        with self._lock:
            count, self._count = self._count, 0
        return count


clamp_counter = ClampCounter()


class ObjectiveConfig(BaseModel):
    """Which techniques a run combines."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    method: Literal["independent", "dml", "kd"] = "dml"
    lambda_: float = Field(default=0.4, ge=0.0, le=1.0, alias="lambda")
    alpha: float = Field(default=0.1, ge=0.0, le=1.0)
    label_smoothing: bool = False
    scheduled_sampling: bool = False
    spec_augment: bool = False
    kd_weight: float = Field(default=0.4, ge=0.0, le=1.0)
    teacher_checkpoint: Optional[Path] = None

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.label_smoothing else 0.0

    def describe(self) -> str:
        parts = [self.method]
        if self.method == "dml":
            parts.append(f"lambda={self.lambda_}")
        if self.method == "kd":
            parts.append(f"kd_weight={self.kd_weight}")
        for flag in ("label_smoothing", "scheduled_sampling", "spec_augment"):
            if getattr(self, flag):
                parts.append(flag)
        return " ".join(parts)


@dataclass(frozen=True)
class GroundTruth:
    """Reference targets (tokens then EOS) and their validity mask, both [B×L]."""

    targets: np.ndarray
    mask: np.ndarray
    vocab_size: int

    @classmethod
    def from_batch(cls, batch: Batch, vocab_size: int) -> "GroundTruth":
        return cls(batch.targets, batch.target_mask, vocab_size)

    @property
    def num_tokens(self) -> int:
        return int(self.mask.sum())

    def one_hot(self) -> np.ndarray:
        out = np.zeros(self.targets.shape + (self.vocab_size,))
        np.put_along_axis(out, self.targets[..., None], 1.0, axis=-1)
        return out


@dataclass
class StudentOutput:
    """Distributions of one student on its own (possibly deformed) inputs."""

    probs: Tensor
    label: str = ""


@dataclass
class CohortDistributions:
    outputs: list[StudentOutput] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.outputs)

    def own(self, k: int) -> Tensor:
        return self.outputs[k].probs

    def peers(self, k: int) -> list[np.ndarray]:
        """Frozen distributions of every student except k."""
        return [o.probs.data for i, o in enumerate(self.outputs) if i != k]


@dataclass
class LossTerms:
    total: Tensor
    mle_term: float
    mimicry_term: Optional[float] = None


# ---------------------------------------------------------------------------
# Primitive reductions
# ---------------------------------------------------------------------------


def soft_cross_entropy(probs: Tensor, target_dist: np.ndarray, mask: np.ndarray) -> Tensor:
    """-(1/T) Σ_valid Σ_v q(v)·log p(v), with T the number of valid positions."""
    if probs.ndim != 3:
        raise DimensionError(f"expected [B×L×V] distributions, got {probs.shape}")
    if target_dist.shape != probs.shape:
        raise DimensionError(f"target distribution {target_dist.shape} does not match {probs.shape}")
    if mask.shape != probs.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match positions {probs.shape[:2]}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("loss needs at least one valid target position")
    log_p, clamped = nc.clamped_log(probs, LOG_FLOOR)
    if clamped:
        clamp_counter.add(clamped)
        logger.debug(f"Clamped {clamped} probabilities below {LOG_FLOOR} before log")
    weighted = nc.mul_constant(log_p, target_dist * mask[..., None])
    return nc.scale(nc.sum_all(weighted), -1.0 / count)


def entropy(dist: np.ndarray, mask: np.ndarray) -> float:
    """Token-mean entropy of a frozen distribution."""
    safe = np.maximum(dist, LOG_FLOOR)
    per_position = -(dist * np.log(safe)).sum(axis=-1)
    return float((per_position * mask).sum() / mask.sum())


def kl_divergence(peer: np.ndarray, own: Tensor, mask: np.ndarray) -> Tensor:
    """(1/T) Σ_valid KL(peer || own), gradient flowing into `own` only."""
    count = int(mask.sum())
    if count == 0:
        raise ContractError("loss needs at least one valid target position")
    log_own, clamped = nc.clamped_log(own, LOG_FLOOR)
    clamp_counter.add(clamped)
    log_peer = np.log(np.maximum(peer, LOG_FLOOR))
    diff = nc.add_constant(nc.scale(log_own, -1.0), log_peer)
    return nc.scale(nc.sum_all(nc.mul_constant(diff, peer * mask[..., None])), 1.0 / count)


# ---------------------------------------------------------------------------
# Single-student objectives
# ---------------------------------------------------------------------------


def mle_loss(probs: Tensor, truth: GroundTruth) -> Tensor:
    return soft_cross_entropy(probs, truth.one_hot(), truth.mask)


def smooth_truth(truth: GroundTruth, alpha: float) -> np.ndarray:
    """(1-α)·onehot + α/|V| at every position."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"label smoothing alpha must be in [0, 1], got {alpha}")
    return (1.0 - alpha) * truth.one_hot() + alpha / truth.vocab_size


def ls_loss(probs: Tensor, truth: GroundTruth, alpha: float) -> Tensor:
    return soft_cross_entropy(probs, smooth_truth(truth, alpha), truth.mask)


def truth_loss(probs: Tensor, truth: GroundTruth, alpha: float) -> Tensor:
    """MLE, or label-smoothed MLE when α > 0."""
    return ls_loss(probs, truth, alpha) if alpha > 0 else mle_loss(probs, truth)


def mimicry_loss(peer: Union[np.ndarray, Tensor], own: Tensor, mask: np.ndarray) -> Tensor:
    """Cross-entropy of `own` against a frozen peer distribution."""
    target = peer.data if isinstance(peer, Tensor) else np.asarray(peer)
    return soft_cross_entropy(own, target, mask)


@dataclass(frozen=True)
class StudentInputs:
    """What one student is fed for a batch: features after deformation and decoder contexts."""

    features: Tensor
    frame_mask: np.ndarray
    decoder_inputs: np.ndarray


def build_inputs(
    model: Seq2SeqTransformer,
    batch: Batch,
    epoch: int,
    batch_index: int,
    sampler: Optional[ScheduledSampler] = None,
    deformer: Optional[SpecAugmenter] = None,
) -> StudentInputs:
    """Apply a student's deformer, then its sampler (whose predictions see the deformed features)."""
    if deformer is not None and not deformer.config.is_identity:
        batch = deformer.deform(batch, epoch, batch_index)
    features = Tensor(batch.features)
    contexts = batch.decoder_inputs
    if sampler is not None and sampler.probability > 0:
        predictions = model.predict_tokens(features, batch.frame_mask, contexts)
        contexts = sampler.contexts(batch, predictions, epoch, batch_index)
    return StudentInputs(features, batch.frame_mask, contexts)


def student_probs(
    model: Seq2SeqTransformer,
    inputs: StudentInputs,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    return model.forward_probs(inputs.features, inputs.frame_mask, inputs.decoder_inputs, rng, training)


def ss_loss(
    model: Seq2SeqTransformer,
    batch: Batch,
    sampler: ScheduledSampler,
    epoch: int,
    batch_index: int,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """MLE on decoder contexts mixed with the model's own predictions."""
    inputs = build_inputs(model, batch, epoch, batch_index, sampler=sampler)
    truth = GroundTruth.from_batch(batch, model.config.vocab_size)
    return mle_loss(student_probs(model, inputs, rng, training), truth)


def sa_loss(
    model: Seq2SeqTransformer,
    batch: Batch,
    deformer: SpecAugmenter,
    epoch: int,
    batch_index: int,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """MLE on masked features."""
    inputs = build_inputs(model, batch, epoch, batch_index, deformer=deformer)
    truth = GroundTruth.from_batch(batch, model.config.vocab_size)
    return mle_loss(student_probs(model, inputs, rng, training), truth)


# ---------------------------------------------------------------------------
# Cohort objectives
# ---------------------------------------------------------------------------


def _mutual(k: int, cohort: CohortDistributions, truth: GroundTruth, lam: float, alpha: float) -> LossTerms:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    if not 0 <= k < len(cohort):
        raise ContractError(f"student index {k} outside cohort of {len(cohort)}")
    own = cohort.own(k)
    base = truth_loss(own, truth, alpha)
    peers = cohort.peers(k)
    if not peers:
        if lam > 0:
            raise ConfigError("mutual learning with lambda > 0 needs at least two students")
        return LossTerms(base, base.item())
    mimic = nc.scale(
        nc.add_scalars(mimicry_loss(p, own, truth.mask) for p in peers),
        1.0 / len(peers),
    )
    total = nc.add(nc.scale(base, 1.0 - lam), nc.scale(mimic, lam))
    return LossTerms(total, base.item(), mimic.item())


def dml_loss(k: int, cohort: CohortDistributions, truth: GroundTruth, lam: float) -> Tensor:
    """(1-λ)·MLE_k + λ·mean over peers of CE(peer -> k)."""
    return _mutual(k, cohort, truth, lam, 0.0).total


def dml_ls_loss(k: int, cohort: CohortDistributions, truth: GroundTruth, lam: float, alpha: float) -> Tensor:
    """Mutual learning whose truth term is label-smoothed."""
    return _mutual(k, cohort, truth, lam, alpha).total


def dml_ss_loss(k: int, cohort: CohortDistributions, truth: GroundTruth, lam: float) -> Tensor:
    """Mutual learning over a cohort whose distributions were computed on sampled contexts.

    Each entry of the cohort must come from that student's own sampler; the
    truth term and the mimicry terms are then taken at the same positions.
    """
    return _mutual(k, cohort, truth, lam, 0.0).total


def dml_sa_loss(k: int, cohort: CohortDistributions, truth: GroundTruth, lam: float) -> Tensor:
    """Mutual learning over a cohort whose distributions were computed on masked features."""
    return _mutual(k, cohort, truth, lam, 0.0).total


def combined_loss(k: int, cohort: CohortDistributions, truth: GroundTruth, lam: float, alpha: float) -> Tensor:
    """Mutual learning with label smoothing over a cohort built with samplers and deformers."""
    return _mutual(k, cohort, truth, lam, alpha).total


def kd_loss(
    student: Tensor,
    teacher: Union[np.ndarray, Tensor],
    truth: GroundTruth,
    weight: float,
    alpha: float = 0.0,
) -> Tensor:
    """(1-w)·truth term + w·CE(frozen teacher -> student)."""
    return kd_terms(student, teacher, truth, weight, alpha).total


def kd_terms(
    student: Tensor,
    teacher: Union[np.ndarray, Tensor],
    truth: GroundTruth,
    weight: float,
    alpha: float = 0.0,
) -> LossTerms:
    if not 0.0 <= weight <= 1.0:
        raise ConfigError(f"kd weight must be in [0, 1], got {weight}")
    base = truth_loss(student, truth, alpha)
    mimic = mimicry_loss(teacher, student, truth.mask)
    total = nc.add(nc.scale(base, 1.0 - weight), nc.scale(mimic, weight))
    return LossTerms(total, base.item(), mimic.item())


def student_objective(
    k: int,
    cohort: CohortDistributions,
    truth: GroundTruth,
    config: ObjectiveConfig,
    teacher: Optional[np.ndarray] = None,
) -> LossTerms:
    """Loss of student k under the configured method."""
    alpha = config.effective_alpha
    if config.method == "independent":
        base = truth_loss(cohort.own(k), truth, alpha)
        return LossTerms(base, base.item())
    if config.method == "kd":
        if teacher is None:
            raise ConfigError("knowledge distillation needs teacher distributions")
        return kd_terms(cohort.own(k), teacher, truth, config.kd_weight, alpha)
    return _mutual(k, cohort, truth, config.lambda_, alpha)
