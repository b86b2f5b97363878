"""Cohort training loop: every student learns from the truth and from its peers.

One step runs in phases. First each student prepares its own inputs (masked
features, sampled decoder contexts) and computes distributions with dropout on.
Then every student's loss is formed against frozen copies of its peers'
distributions, all gradients are computed, and only when every gradient is
finite are the students updated. Students never share parameters or random
streams, so the forward phase can fan out over a thread pool.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from .augment import SamplingSchedule, ScheduledSampler, SpecAugmentConfig, SpecAugmenter, sampling_probability
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .data import Corpus, FeatureStandardizer, make_batches
from .decoder import evaluate_corpus
from .metrics import EpochRecord, MetricsWriter, StepRecord
from .model import ModelConfig, ModelParams, Seq2SeqTransformer
from .numcore import Tensor
from .objectives import (
    CohortDistributions,
    GroundTruth,
    LossTerms,
    ObjectiveConfig,
    StudentInputs,
    StudentOutput,
    build_inputs,
    clamp_counter,
    mimicry_loss,
    mle_loss,
    student_objective,
    student_probs,
)
from .optimizer import AdamState, adam_step, check_gradients_finite, clip_gradients, learning_rate
from ..utils.exceptions import ConfigError, NumericError
from ..utils.seeding import PURPOSE_DROPOUT, PURPOSE_INIT, derive_rng

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[str, str], None]


class TrainerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=32, ge=1)
    max_epochs: int = Field(default=100, ge=1)
    warmup_steps: int = Field(default=4000, ge=1)
    lr_scale: float = Field(default=1.0, gt=0.0)
    patience: int = Field(default=5, ge=0)
    grad_clip: float = Field(default=5.0, ge=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.98, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-9, gt=0.0)
    workers: int = Field(default=1, ge=1)
    update_mode: Literal["synchronous", "sequential"] = "synchronous"
    selection: Literal["best", "compact"] = "best"
    shuffle: bool = True
    progress_bar: bool = False


@dataclass
class Student:
    index: int
    seed: int
    params: ModelParams
    optimizer: AdamState
    model_name: str = ""
    compact: bool = False

    @classmethod
    def create(
        cls,
        index: int,
        seed: int,
        config: ModelConfig,
        trainer: TrainerConfig,
        model_name: str = "",
        compact: bool = False,
    ) -> "Student":
        """Fresh student; equal seeds give bit-identical parameters."""
        params = ModelParams.initialize(config, derive_rng(seed, PURPOSE_INIT))
        optimizer = AdamState.for_params(params, trainer.adam_beta1, trainer.adam_beta2, trainer.adam_eps)
        return cls(index, seed, params, optimizer, model_name, compact)

    @property
    def model(self) -> Seq2SeqTransformer:
        return Seq2SeqTransformer(self.params)

    @property
    def label(self) -> str:
        name = self.model_name or "student"
        return f"{name}#{self.index}"


@dataclass
class StudentStep:
    loss: float
    mle_term: float
    mimicry_term: Optional[float]
    grad_norm: float
    clipped: bool
    lr: float


@dataclass
class ValidationResult:
    valid_loss: float
    cer_greedy: float
    valid_mimicry: Optional[float] = None


@dataclass
class CheckpointInfo:
    student: int
    path: Path
    valid_loss: float
    epoch: int
    compact: bool = False
    model_name: str = ""


@dataclass
class TrainResult:
    checkpoints: list[CheckpointInfo]
    epochs_run: int
    stopped_early: bool
    best_valid_loss: float
    metrics_path: Optional[Path] = None
    history: list[list[ValidationResult]] = field(default_factory=list)


@dataclass
class _Prepared:
    inputs: StudentInputs
    probs: Tensor
    teacher: Optional[np.ndarray]


class CohortTrainer:
    """Trains K students jointly under one objective."""

    def __init__(
        self,
        students: list[Student],
        objective: ObjectiveConfig,
        config: TrainerConfig,
        spec_augment: Optional[SpecAugmentConfig] = None,
        sampling: Optional[SamplingSchedule] = None,
        teacher: Optional[ModelParams] = None,
        shuffle_seed: int = 0,
        standardizer: Optional[FeatureStandardizer] = None,
    ):
        if not students:
            raise ConfigError("a cohort needs at least one student")
        vocab = {s.params.config.vocab_size for s in students}
        if len(vocab) != 1:
            raise ConfigError(f"students disagree on vocabulary size: {sorted(vocab)}")
        if objective.method == "dml" and objective.lambda_ > 0 and len(students) < 2:
            raise ConfigError("mutual learning with lambda > 0 needs at least two students")
        if objective.method == "kd" and teacher is None:
            raise ConfigError("knowledge distillation needs a teacher checkpoint")
        self.students = students
        self.objective = objective
        self.config = config
        self.spec_augment = spec_augment or SpecAugmentConfig()
        self.sampling = sampling or SamplingSchedule()
        self.teacher = Seq2SeqTransformer(teacher.frozen()) if teacher is not None else None
        self.shuffle_seed = shuffle_seed
        self.standardizer = standardizer
        self.vocab_size = vocab.pop()
        self.step = 0
        self.clamped_total = 0
        self._pool: Optional[ThreadPoolExecutor] = None

    # -- helpers ------------------------------------------------------------

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def sampler_for(self, student: Student, epoch: int) -> Optional[ScheduledSampler]:
        if not self.objective.scheduled_sampling:
            return None
        return ScheduledSampler(sampling_probability(epoch, self.sampling), student.seed)

    def deformer_for(self, student: Student) -> Optional[SpecAugmenter]:
        if not self.objective.spec_augment:
            return None
        return SpecAugmenter(self.spec_augment, student.seed)

    def _dropout_rng(self, student: Student, epoch: int, batch_index: int) -> np.random.Generator:
        return derive_rng(student.seed, PURPOSE_DROPOUT, epoch, batch_index)

    def _prepare(self, student: Student, batch, epoch: int, batch_index: int) -> _Prepared:
        model = student.model
        inputs = build_inputs(
            model, batch, epoch, batch_index,
            sampler=self.sampler_for(student, epoch),
            deformer=self.deformer_for(student),
        )
        probs = student_probs(model, inputs, self._dropout_rng(student, epoch, batch_index), training=True)
        teacher = None
        if self.teacher is not None:
            teacher = student_probs(self.teacher, inputs).data
        return _Prepared(inputs, probs, teacher)

    def _refresh(self, student: Student, prepared: _Prepared, epoch: int, batch_index: int) -> Tensor:
        """Recompute a student's distributions with its current parameters, no graph."""
        model = Seq2SeqTransformer(student.params.frozen())
        return student_probs(model, prepared.inputs, self._dropout_rng(student, epoch, batch_index), training=True)

    def _update(self, student: Student, terms: LossTerms, epoch: int) -> StudentStep:
        lr = learning_rate(self.step, student.params.config.model_dim, self.config.warmup_steps, self.config.lr_scale)
        norm, clipped = clip_gradients(student.params, self.config.grad_clip)
        if clipped:
            logger.warning(
                f"Clipped gradient norm of {student.label} from {norm:.3f} to {self.config.grad_clip} "
                f"(step {self.step}, epoch {epoch})"
            )
        adam_step(student.params, student.optimizer, lr)
        return StudentStep(terms.total.item(), terms.mle_term, terms.mimicry_term, norm, clipped, lr)

    def _feature_stats(self) -> dict:
        if self.standardizer is None:
            return {}
        mean, std = self.standardizer.to_lists()
        return {"feature_mean": mean, "feature_std": std}

    def _abort(self, error: NumericError) -> None:
        for s in self.students:
            s.params.zero_grad()
        logger.error(f"Aborting step {self.step}: {error}")

    # -- one step -----------------------------------------------------------

    def cohort_step(self, batch, epoch: int, batch_index: int) -> list[StudentStep]:
        """Advance every student by one update on `batch`."""
        self.step += 1
        for s in self.students:
            s.params.zero_grad()
        truth = GroundTruth.from_batch(batch, self.vocab_size)
        try:
            prepared = self._map(lambda s: self._prepare(s, batch, epoch, batch_index), self.students)
            if self.config.update_mode == "sequential":
                return self._sequential(prepared, truth, epoch, batch_index)
            cohort = CohortDistributions([StudentOutput(p.probs, s.label) for s, p in zip(self.students, prepared)])
            terms = [
                student_objective(k, cohort, truth, self.objective, prepared[k].teacher)
                for k in range(len(self.students))
            ]
            self._map(lambda t: t.total.backward(), terms)
            for s in self.students:
                check_gradients_finite(s.params)
        except NumericError as e:
            self._abort(e)
            raise
        steps = [self._update(s, t, epoch) for s, t in zip(self.students, terms)]
        self._report_clamping()
        return steps

    def _report_clamping(self) -> None:
        clamped = clamp_counter.reset()
        if clamped:
            self.clamped_total += clamped
            logger.warning(f"Clamped {clamped} probabilities before log at step {self.step}")

    def _sequential(self, prepared: list[_Prepared], truth: GroundTruth, epoch: int, batch_index: int) -> list[StudentStep]:
        """Students update in order; student k sees peers 0..k-1 after their update."""
        outputs = [StudentOutput(p.probs, s.label) for s, p in zip(self.students, prepared)]
        results = []
        for k, student in enumerate(self.students):
            for i in range(k):
                outputs[i] = StudentOutput(self._refresh(self.students[i], prepared[i], epoch, batch_index), outputs[i].label)
            terms = student_objective(k, CohortDistributions(outputs), truth, self.objective, prepared[k].teacher)
            terms.total.backward()
            check_gradients_finite(student.params)
            results.append(self._update(student, terms, epoch))
        self._report_clamping()
        return results

    # -- validation ---------------------------------------------------------

    def validate(self, corpus: Corpus) -> list[ValidationResult]:
        """Teacher-forced MLE, peer mimicry and greedy CER per student; dropout and deformation off."""
        batches = make_batches(corpus, self.config.batch_size)
        truths = [GroundTruth.from_batch(b, self.vocab_size) for b in batches]
        total_tokens = sum(t.num_tokens for t in truths)

        def _probs(student: Student) -> list[Tensor]:
            model = Seq2SeqTransformer(student.params.frozen())
            return [model.forward_probs(Tensor(b.features), b.frame_mask, b.decoder_inputs) for b in batches]

        all_probs = self._map(_probs, self.students)
        results = []
        for k, student in enumerate(self.students):
            loss = sum(mle_loss(p, t).item() * t.num_tokens for p, t in zip(all_probs[k], truths)) / total_tokens
            mimicry = None
            if len(self.students) > 1:
                per_peer = []
                for i in range(len(self.students)):
                    if i == k:
                        continue
                    per_peer.append(sum(
                        mimicry_loss(all_probs[i][b].data, all_probs[k][b], truths[b].mask).item() * truths[b].num_tokens
                        for b in range(len(batches))
                    ) / total_tokens)
                mimicry = float(np.mean(per_peer))
            cer = evaluate_corpus(student.params, corpus, beam=1).cer
            results.append(ValidationResult(loss, cer, mimicry))
        return results

    # -- full run -----------------------------------------------------------

    def train(
        self,
        train_corpus: Corpus,
        valid_corpus: Corpus,
        output_dir: Path,
        progress_callback: Optional[ProgressCallback] = None,
    ) -> TrainResult:
        """Train until `max_epochs`, or until the best validation loss over all students
        has not improved for more than `patience` epochs."""
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        metrics = MetricsWriter(output_dir / "metrics.jsonl")
        report = progress_callback or (lambda stage, msg: None)
        best = [float("inf")] * len(self.students)
        checkpoints: list[Optional[CheckpointInfo]] = [None] * len(self.students)
        best_overall = float("inf")
        stale = 0
        history = []
        stopped_early = False
        epochs_run = 0
        clamp_counter.reset()

        with ThreadPoolExecutor(max_workers=self.config.workers) if self.config.workers > 1 else _NoPool() as pool:
            self._pool = pool
            try:
                for epoch in range(self.config.max_epochs):
                    epochs_run = epoch + 1
                    shuffle = self.shuffle_seed if self.config.shuffle else None
                    batches = make_batches(train_corpus, self.config.batch_size, shuffle, epoch)
                    progress = tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not self.config.progress_bar)
                    for batch_index, batch in enumerate(progress):
                        steps = self.cohort_step(batch, epoch, batch_index)
                        for s, st in zip(self.students, steps):
                            metrics.write(StepRecord(
                                step=self.step, epoch=epoch, student=s.index, lr=st.lr, loss=st.loss,
                                mle_term=st.mle_term, mimicry_term=st.mimicry_term,
                                grad_norm=st.grad_norm, clipped=st.clipped,
                            ))

                    results = self.validate(valid_corpus)
                    history.append(results)
                    for k, (s, r) in enumerate(zip(self.students, results)):
                        improved = r.valid_loss < best[k]
                        if improved:
                            best[k] = r.valid_loss
                            path = output_dir / f"student{s.index}" / "best.ckpt"
                            meta = CheckpointMeta(
                                model=s.params.config, student=s.index, model_name=s.model_name,
                                compact=s.compact, epoch=epoch, step=self.step, valid_loss=r.valid_loss,
                                **self._feature_stats(),
                            )
                            save_checkpoint(path, s.params, meta)
                            checkpoints[k] = CheckpointInfo(s.index, path, r.valid_loss, epoch, s.compact, s.model_name)
                        metrics.write(EpochRecord(
                            epoch=epoch, student=s.index, valid_loss=r.valid_loss,
                            cer_greedy=r.cer_greedy, valid_mimicry=r.valid_mimicry, improved=improved,
                        ))
                    summary = " ".join(
                        f"{s.label}: loss={r.valid_loss:.4f} cer={r.cer_greedy:.4f}"
                        for s, r in zip(self.students, results)
                    )
                    report("VALIDATE", f"epoch {epoch}: {summary}")

                    cohort_best = min(r.valid_loss for r in results)
                    if cohort_best < best_overall:
                        best_overall = cohort_best
                        stale = 0
                    else:
                        stale += 1
                    if stale > self.config.patience:
                        stopped_early = True
                        report("TRAIN", f"no improvement for {stale} epoch(s); stopping after epoch {epoch}")
                        break
            finally:
                self._pool = None

        if self.clamped_total:
            logger.warning(f"{self.clamped_total} probabilities were clamped before log during training")
        return TrainResult(
            checkpoints=[c for c in checkpoints if c is not None],
            epochs_run=epochs_run,
            stopped_early=stopped_early,
            best_valid_loss=best_overall,
            metrics_path=metrics.path,
            history=history,
        )


class _NoPool:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


@dataclass
class Selection:
    info: CheckpointInfo
    params: ModelParams


def select_model(checkpoints: list[CheckpointInfo], mode: str = "best") -> Selection:
    """Pick the student to evaluate.

    `best` takes the lowest validation loss, ties going to the lowest student
    index; `compact` takes the first compact student.
    """
    if not checkpoints:
        raise ConfigError("no checkpoints to select from")
    if mode == "best":
        chosen = min(checkpoints, key=lambda c: (c.valid_loss, c.student))
    elif mode == "compact":
        compact = [c for c in checkpoints if c.compact]
        if not compact:
            raise ConfigError("selection 'compact' requested but the cohort has no compact student")
        chosen = min(compact, key=lambda c: c.student)
    else:
        raise ConfigError(f"unknown selection mode '{mode}'")
    params, _ = load_checkpoint(chosen.path)
    return Selection(chosen, params)
