"""Tests for the cohort training loop."""

import json

import numpy as np
import pytest

import src.modules.trainer as trainer_module
from src.modules.augment import SamplingSchedule, SpecAugmentConfig
from src.modules.data import make_batches
from src.modules.metrics import EpochRecord, StepRecord, read_metrics
from src.modules.checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from src.modules.objectives import ObjectiveConfig
from src.modules.trainer import (
    CheckpointInfo,
    CohortTrainer,
    Student,
    StudentStep,
    TrainerConfig,
    ValidationResult,
    select_model,
)
from src.utils.exceptions import ConfigError, NumericError


@pytest.fixture
def trainer_config():
    return TrainerConfig(batch_size=4, max_epochs=1, warmup_steps=2, lr_scale=1.0, shuffle=True)


def _students(model_config, trainer_config, seeds, compact=()):
    return [
        Student.create(i, seed, model_config, trainer_config, model_name="tiny", compact=i in compact)
        for i, seed in enumerate(seeds)
    ]


def _run_steps(trainer, corpus, epochs=1):
    for epoch in range(epochs):
        for b, batch in enumerate(make_batches(corpus, trainer.config.batch_size, 0, epoch)):
            trainer.cohort_step(batch, epoch, b)


def test_equal_seeds_give_identical_students(tiny_model_config, trainer_config):
    a, b = _students(tiny_model_config, trainer_config, [5, 5])
    assert a.params.equals(b.params)
    assert a.label == "tiny#0"


def test_equal_seeds_stay_identical_through_training(tiny_model_config, trainer_config, tiny_task):
    model_config = tiny_model_config.model_copy(update={"dropout_rate": 0.1})
    config = trainer_config.model_copy(update={"batch_size": 2})
    objective = ObjectiveConfig(
        method="dml", lambda_=0.4, label_smoothing=True, scheduled_sampling=True, spec_augment=True,
    )
    trainer = CohortTrainer(
        _students(model_config, config, [5, 5]),
        objective,
        config,
        spec_augment=SpecAugmentConfig(max_freq_width=2, max_time_width=3),
        sampling=SamplingSchedule(target_probability=0.3, ramp_epochs=5),
    )

    _run_steps(trainer, tiny_task.train, epochs=50)

    assert trainer.step >= 200
    a, b = trainer.students
    assert a.params.equals(b.params)


def test_mutual_learning_needs_two_students(tiny_model_config, trainer_config):
    with pytest.raises(ConfigError):
        CohortTrainer(_students(tiny_model_config, trainer_config, [1]), ObjectiveConfig(method="dml"), trainer_config)


def test_distillation_needs_teacher(tiny_model_config, trainer_config):
    with pytest.raises(ConfigError):
        CohortTrainer(_students(tiny_model_config, trainer_config, [1]), ObjectiveConfig(method="kd"), trainer_config)


def test_zero_lambda_pair_trains_like_a_single_student(tiny_model_config, trainer_config, tiny_task):
    config = tiny_model_config.model_copy(update={"dropout_rate": 0.1})
    alone = CohortTrainer(_students(config, trainer_config, [3]), ObjectiveConfig(method="dml", lambda_=0.0), trainer_config)
    pair = CohortTrainer(_students(config, trainer_config, [3, 4]), ObjectiveConfig(method="dml", lambda_=0.0), trainer_config)

    _run_steps(alone, tiny_task.train, epochs=2)
    _run_steps(pair, tiny_task.train, epochs=2)

    assert alone.students[0].params.equals(pair.students[0].params)


def test_independent_students_match_their_solo_runs(tiny_model_config, trainer_config, tiny_task):
    cohort = CohortTrainer(_students(tiny_model_config, trainer_config, [3, 4]), ObjectiveConfig(method="independent"), trainer_config)
    solo = CohortTrainer(_students(tiny_model_config, trainer_config, [4]), ObjectiveConfig(method="independent"), trainer_config)

    _run_steps(cohort, tiny_task.train)
    _run_steps(solo, tiny_task.train)

    assert cohort.students[1].params.equals(solo.students[0].params)


def test_mutual_learning_is_deterministic(tiny_model_config, trainer_config, tiny_task):
    objective = ObjectiveConfig(method="dml", lambda_=0.5, scheduled_sampling=True, spec_augment=True)
    runs = []
    for _ in range(2):
        trainer = CohortTrainer(_students(tiny_model_config, trainer_config, [1, 2]), objective, trainer_config)
        _run_steps(trainer, tiny_task.train)
        runs.append(trainer.students)
    for a, b in zip(*runs):
        assert a.params.equals(b.params)


def test_mutual_learning_changes_the_trajectory(tiny_model_config, trainer_config, tiny_task):
    independent = CohortTrainer(_students(tiny_model_config, trainer_config, [1, 2]), ObjectiveConfig(method="independent"), trainer_config)
    mutual = CohortTrainer(_students(tiny_model_config, trainer_config, [1, 2]), ObjectiveConfig(method="dml", lambda_=0.5), trainer_config)
    _run_steps(independent, tiny_task.train)
    _run_steps(mutual, tiny_task.train)
    assert not independent.students[0].params.equals(mutual.students[0].params)


def test_sequential_mode_only_changes_later_students(tiny_model_config, trainer_config, tiny_task):
    sequential_config = trainer_config.model_copy(update={"update_mode": "sequential"})
    objective = ObjectiveConfig(method="dml", lambda_=0.5)
    sync = CohortTrainer(_students(tiny_model_config, trainer_config, [1, 2]), objective, trainer_config)
    seq = CohortTrainer(_students(tiny_model_config, sequential_config, [1, 2]), objective, sequential_config)

    batch = make_batches(tiny_task.train, 4)[0]
    sync.cohort_step(batch, 0, 0)
    seq.cohort_step(batch, 0, 0)

    assert sync.students[0].params.equals(seq.students[0].params)
    assert not sync.students[1].params.equals(seq.students[1].params)


def test_non_finite_gradient_aborts_without_updating(monkeypatch, tiny_model_config, trainer_config, tiny_task):
    trainer = CohortTrainer(_students(tiny_model_config, trainer_config, [1, 2]), ObjectiveConfig(method="dml"), trainer_config)
    before = [s.params.copy() for s in trainer.students]

    def poisoned(params):
        raise NumericError("non-finite gradient in output.bias")

    monkeypatch.setattr(trainer_module, "check_gradients_finite", poisoned)
    with pytest.raises(NumericError):
        trainer.cohort_step(make_batches(tiny_task.train, 4)[0], 0, 0)

    for student, original in zip(trainer.students, before):
        assert student.params.equals(original)
        assert all(t.grad is None for _, t in student.params)
        assert student.optimizer.step == 0


def _scripted(trainer, losses):
    """Replace the expensive parts of an epoch with a fixed validation-loss script."""
    script = iter(losses)

    def fake_step(batch, epoch, batch_index):
        trainer.step += 1
        return [StudentStep(1.0, 1.0, None, 0.5, False, 0.01) for _ in trainer.students]

    def fake_validate(corpus):
        values = next(script)
        return [ValidationResult(v, 0.5) for v in values]

    trainer.cohort_step = fake_step
    trainer.validate = fake_validate


@pytest.mark.parametrize(
    "patience, expected_epochs, stopped",
    [(0, 3, True), (1, 5, False), (5, 5, False)],
)
def test_patience_counts_epochs_without_cohort_improvement(tmp_path, tiny_model_config, trainer_config, tiny_task, patience, expected_epochs, stopped):
    config = trainer_config.model_copy(update={"max_epochs": 5, "patience": patience})
    trainer = CohortTrainer(_students(tiny_model_config, config, [1, 2]), ObjectiveConfig(method="dml"), config)
    _scripted(trainer, [(1.0, 1.2), (1.1, 0.9), (1.0, 0.95), (0.8, 1.0), (0.85, 0.9)])

    result = trainer.train(tiny_task.train, tiny_task.valid, tmp_path)

    assert result.epochs_run == expected_epochs
    assert result.stopped_early is stopped


def test_train_writes_best_checkpoints_and_metrics(tmp_path, tiny_model_config, trainer_config, tiny_task):
    config = trainer_config.model_copy(update={"max_epochs": 3, "patience": 5})
    trainer = CohortTrainer(_students(tiny_model_config, config, [1, 2]), ObjectiveConfig(method="dml"), config)
    _scripted(trainer, [(1.0, 1.2), (1.1, 0.9), (0.7, 1.0)])
    stages = []

    result = trainer.train(tiny_task.train, tiny_task.valid, tmp_path, progress_callback=lambda s, m: stages.append(s))

    assert [c.epoch for c in result.checkpoints] == [2, 1]
    assert [c.valid_loss for c in result.checkpoints] == [0.7, 0.9]
    assert result.best_valid_loss == 0.7
    assert (tmp_path / "student0" / "best.ckpt").exists()
    assert stages == ["VALIDATE"] * 3

    records = list(read_metrics(result.metrics_path))
    epochs = [r for r in records if isinstance(r, EpochRecord)]
    assert len(epochs) == 6
    assert [r.improved for r in epochs if r.student == 1] == [True, True, False]
    assert sum(isinstance(r, StepRecord) for r in records) == 2 * 3 * len(make_batches(tiny_task.train, 4))


def test_real_epoch_produces_loadable_checkpoints(tmp_path, tiny_model_config, trainer_config, tiny_task):
    trainer = CohortTrainer(_students(tiny_model_config, trainer_config, [1, 2]), ObjectiveConfig(method="dml"), trainer_config)
    result = trainer.train(tiny_task.train, tiny_task.valid, tmp_path)

    assert result.epochs_run == 1
    assert len(result.checkpoints) == 2
    params, meta = load_checkpoint(result.checkpoints[0].path)
    assert params.equals(trainer.students[0].params)
    assert meta.student == 0
    assert np.isfinite(result.best_valid_loss)
    assert all(np.isfinite(r.valid_mimicry) for r in result.history[0])


def test_metrics_records_have_exact_keys(tmp_path, tiny_model_config, trainer_config, tiny_task):
    trainer = CohortTrainer(_students(tiny_model_config, trainer_config, [1, 2]), ObjectiveConfig(method="dml"), trainer_config)
    result = trainer.train(tiny_task.train, tiny_task.valid, tmp_path)

    lines = [json.loads(line) for line in result.metrics_path.read_text().splitlines()]
    steps = [r for r in lines if r["kind"] == "step"]
    epochs = [r for r in lines if r["kind"] == "epoch"]
    assert steps and epochs
    assert all(set(r) == {
        "kind", "step", "epoch", "student", "lr", "loss", "mle_term", "mimicry_term", "grad_norm", "clipped",
    } for r in steps)
    assert all(set(r) == {
        "kind", "epoch", "student", "valid_loss", "cer_greedy", "valid_mimicry", "improved",
    } for r in epochs)


def _saved(tmp_path, params, index, loss, compact=False):
    meta = CheckpointMeta(model=params.config, student=index, valid_loss=loss, compact=compact)
    path = save_checkpoint(tmp_path / f"student{index}" / "best.ckpt", params, meta)
    return CheckpointInfo(index, path, loss, 0, compact)


def test_select_best_breaks_ties_by_lowest_index(tmp_path, tiny_params):
    infos = [_saved(tmp_path, tiny_params, 2, 0.5), _saved(tmp_path, tiny_params, 1, 0.5), _saved(tmp_path, tiny_params, 0, 0.7)]
    assert select_model(infos, "best").info.student == 1


def test_select_compact(tmp_path, tiny_params):
    infos = [_saved(tmp_path, tiny_params, 0, 0.1), _saved(tmp_path, tiny_params, 1, 0.9, compact=True)]
    selection = select_model(infos, "compact")
    assert selection.info.student == 1
    assert selection.params.equals(tiny_params)

    with pytest.raises(ConfigError):
        select_model(infos[:1], "compact")
