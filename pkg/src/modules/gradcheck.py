"""Finite-difference verification of every training objective's gradients.

A toy cohort (one encoder block, one decoder block, width 8, vocabulary 5, no
dropout) is built from fixed inputs; sampled contexts, masked features and
peer/teacher distributions are computed once and held fixed, so each objective
becomes a deterministic function of student 0's parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from .augment import ScheduledSampler, SpecAugmentConfig, SpecAugmenter
from .data import SyntheticTaskConfig, collate, generate_task
from .model import ModelConfig, ModelParams, Seq2SeqTransformer
from .numcore import Tensor
from .objectives import (
    CohortDistributions,
    GroundTruth,
    StudentInputs,
    StudentOutput,
    build_inputs,
    combined_loss,
    dml_loss,
    dml_ls_loss,
    dml_sa_loss,
    dml_ss_loss,
    kd_loss,
    ls_loss,
    mle_loss,
    student_probs,
)
from ..utils.exceptions import ConfigError
from ..utils.seeding import PURPOSE_GRADCHECK, PURPOSE_INIT, derive_rng, derive_seed

logger = logging.getLogger(__name__)

OBJECTIVES = ("mle", "ls", "ss", "sa", "dml", "dml_ls", "dml_ss", "dml_sa", "kd", "combined")


class GradcheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    step: float = Field(default=1e-5, gt=0.0)
    tolerance: float = Field(default=1e-4, gt=0.0)
    max_elements_per_tensor: Optional[int] = Field(default=16, ge=1)
    seed: int = Field(default=0, ge=0)
    lambda_: float = Field(default=0.4, ge=0.0, le=1.0, alias="lambda")
    alpha: float = Field(default=0.1, ge=0.0, le=1.0)
    kd_weight: float = Field(default=0.4, ge=0.0, le=1.0)
    sampling_probability: float = Field(default=0.5, ge=0.0, le=1.0)
    objectives: list[str] = Field(default_factory=lambda: list(OBJECTIVES))


def toy_model_config() -> ModelConfig:
    return ModelConfig(
        num_encoder_blocks=1,
        num_decoder_blocks=1,
        model_dim=8,
        ffn_dim=16,
        num_heads=1,
        vocab_size=5,
        feature_dim=4,
        dropout_rate=0.0,
        max_positions=64,
    )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    return diff / max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-6)


@dataclass
class ObjectiveCheck:
    name: str
    max_rel_error: float
    worst_parameter: str
    passed: bool
    per_tensor: dict[str, float] = field(default_factory=dict)


@dataclass
class GradcheckReport:
    checks: list[ObjectiveCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: ModelParams,
    step: float = 1e-5,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> dict[str, float]:
    """Relative error between backward and central differences, per parameter tensor.

    With `max_elements`, only that many randomly chosen coordinates of each
    tensor are compared.
    """
    params.zero_grad()
    loss_fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params}
    params.zero_grad()

    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, t in params:
        flat_count = t.size
        if max_elements is not None and flat_count > max_elements:
            coords = np.sort(rng.choice(flat_count, size=max_elements, replace=False))
        else:
            coords = np.arange(flat_count)
        numeric = np.empty(len(coords))
        flat = t.data.reshape(-1)
        for i, c in enumerate(coords):
            original = flat[c]
            flat[c] = original + step
            plus = loss_fn().item()
            flat[c] = original - step
            minus = loss_fn().item()
            flat[c] = original
            numeric[i] = (plus - minus) / (2.0 * step)
        errors[name] = relative_error(analytic[name].reshape(-1)[coords], numeric)
    return errors


def build_objectives(config: GradcheckConfig) -> tuple[ModelParams, dict[str, Callable[[], Tensor]]]:
    """Toy student 0 plus a closure per objective over fixed inputs."""
    task = generate_task(SyntheticTaskConfig(
        vocab_size=5, feature_dim=4, frames_per_token=4, noise_std=0.5,
        min_tokens=1, max_tokens=3, train_size=2, valid_size=0, test_size=0, seed=config.seed,
    ))
    batch = collate(task.train.utterances)
    model_cfg = toy_model_config()
    seeds = [derive_seed(config.seed, PURPOSE_GRADCHECK, k) for k in range(3)]
    student, peer, teacher = (ModelParams.initialize(model_cfg, derive_rng(s, PURPOSE_INIT)) for s in seeds)
    own = Seq2SeqTransformer(student)
    truth = GroundTruth.from_batch(batch, model_cfg.vocab_size)

    sampler = ScheduledSampler(config.sampling_probability, seeds[0])
    deformer = SpecAugmenter(SpecAugmentConfig(num_freq_masks=1, num_time_masks=1, max_freq_width=1, max_time_width=2), seeds[0])
    peer_sampler = ScheduledSampler(config.sampling_probability, seeds[1])
    peer_deformer = SpecAugmenter(deformer.config, seeds[1])

    def inputs(sampler=None, deformer=None, model=own) -> StudentInputs:
        return build_inputs(model, batch, epoch=0, batch_index=0, sampler=sampler, deformer=deformer)

    plain = inputs()
    sampled = inputs(sampler)
    masked = inputs(deformer=deformer)
    both = inputs(sampler, deformer)
    peer_model = Seq2SeqTransformer(peer.frozen())

    def peer_probs(sampler=None, deformer=None) -> np.ndarray:
        return student_probs(peer_model, inputs(sampler, deformer, model=peer_model)).data

    peer_plain = peer_probs()
    peer_sampled = peer_probs(peer_sampler)
    peer_masked = peer_probs(deformer=peer_deformer)
    peer_both = peer_probs(peer_sampler, peer_deformer)
    teacher_probs = student_probs(Seq2SeqTransformer(teacher.frozen()), plain).data

    def cohort(own_inputs: StudentInputs, peer: np.ndarray) -> CohortDistributions:
        return CohortDistributions([StudentOutput(student_probs(own, own_inputs)), StudentOutput(Tensor(peer))])

    lam, alpha = config.lambda_, config.alpha
    closures = {
        "mle": lambda: mle_loss(student_probs(own, plain), truth),
        "ls": lambda: ls_loss(student_probs(own, plain), truth, alpha),
        "ss": lambda: mle_loss(student_probs(own, sampled), truth),
        "sa": lambda: mle_loss(student_probs(own, masked), truth),
        "dml": lambda: dml_loss(0, cohort(plain, peer_plain), truth, lam),
        "dml_ls": lambda: dml_ls_loss(0, cohort(plain, peer_plain), truth, lam, alpha),
        "dml_ss": lambda: dml_ss_loss(0, cohort(sampled, peer_sampled), truth, lam),
        "dml_sa": lambda: dml_sa_loss(0, cohort(masked, peer_masked), truth, lam),
        "kd": lambda: kd_loss(student_probs(own, plain), teacher_probs, truth, config.kd_weight),
        "combined": lambda: combined_loss(0, cohort(both, peer_both), truth, lam, alpha),
    }
    return student, closures


def run_gradcheck(config: Optional[GradcheckConfig] = None, show_progress: bool = False) -> GradcheckReport:
    config = config or GradcheckConfig()
    params, closures = build_objectives(config)
    unknown = sorted(set(config.objectives) - set(closures))
    if unknown:
        raise ConfigError(f"unknown objectives: {', '.join(unknown)}")
    checks = []
    for name in tqdm(config.objectives, desc="gradcheck", disable=not show_progress):
        rng = derive_rng(config.seed, PURPOSE_GRADCHECK, OBJECTIVES.index(name))
        errors = check_gradients(closures[name], params, config.step, config.max_elements_per_tensor, rng)
        worst = max(errors, key=errors.get)
        check = ObjectiveCheck(name, errors[worst], worst, errors[worst] < config.tolerance, errors)
        level = logging.INFO if check.passed else logging.ERROR
        logger.log(level, f"[gradcheck] {name}: max rel error {check.max_rel_error:.3e} at {worst}")
        checks.append(check)
    return GradcheckReport(checks)
