"""Experiment orchestrator: data, cohort training, selection, evaluation and grids."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .config import GridRow, RunConfig, Settings, StudentSpec, write_run_config
from .modules.checkpoint import load_checkpoint
from .modules.data import Corpus, FeatureStandardizer, generate_task, read_corpus, write_corpus
from .modules.decoder import CorpusReport, evaluate_corpus, write_report
from .modules.model import ModelParams
from .modules.trainer import CohortTrainer, Selection, Student, TrainResult, select_model
from .utils.exceptions import ConfigError
from .utils.seeding import student_seed

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[str, str], None]


def table1_rows() -> list[GridRow]:
    """The sixteen configurations of the large/compact comparison."""
    all_on = dict(label_smoothing=True, scheduled_sampling=True, spec_augment=True)
    large = [
        GridRow(name="large-none"),
        GridRow(name="large-ls", label_smoothing=True),
        GridRow(name="large-ss", scheduled_sampling=True),
        GridRow(name="large-sa", spec_augment=True),
        GridRow(name="large-all", **all_on),
        GridRow(name="large-dml", method="dml"),
        GridRow(name="large-dml+ls", method="dml", label_smoothing=True),
        GridRow(name="large-dml+ss", method="dml", scheduled_sampling=True),
        GridRow(name="large-dml+sa", method="dml", spec_augment=True),
        GridRow(name="large-dml+all", method="dml", **all_on),
    ]
    compact = [
        GridRow(name="compact-none", setup="compact"),
        GridRow(name="compact-all", setup="compact", **all_on),
        GridRow(name="compact-kd", setup="compact", method="kd"),
        GridRow(name="compact-kd+all", setup="compact", method="kd", **all_on),
        GridRow(name="compact-dml", setup="compact", method="dml"),
        GridRow(name="compact-dml+all", setup="compact", method="dml", **all_on),
    ]
    return large + compact


@dataclass
class RunOutcome:
    output_dir: Path
    train: TrainResult
    selection: Selection
    reports: list[CorpusReport] = field(default_factory=list)


class TrainingPipeline:
    """Runs one experiment described by a `RunConfig`."""

    def __init__(self, settings: Settings, config: RunConfig, workers: Optional[int] = None):
        """
        Initialize the pipeline.

        Args:
            settings: Application settings
            config: Experiment description
            workers: Thread-pool size override (defaults to the config, then settings)
        """
        self.settings = settings
        self.config = config
        pinned = "workers" in config.trainer.model_fields_set
        self.workers = workers or (config.trainer.workers if pinned else settings.workers)
        self.output_dir = config.resolved_output_dir(settings)
        self._corpora: Optional[dict[str, Corpus]] = None
        self._standardizer: Optional[FeatureStandardizer] = None

    # -- data ---------------------------------------------------------------

    def _raw_corpora(self) -> dict[str, Corpus]:
        if self.config.data_dir is None:
            return generate_task(self.config.task).corpora
        data_dir = Path(self.config.data_dir)
        if not data_dir.is_dir():
            raise ConfigError(f"data_dir does not exist: {data_dir}")
        corpora = {}
        for name in ("train", "valid"):
            path = data_dir / f"{name}.corpus"
            if not path.exists():
                raise ConfigError(f"missing {path}")
            corpora[name] = read_corpus(path)
        for path in sorted(data_dir.glob("test*.corpus")):
            corpora[path.stem] = read_corpus(path)
        return corpora

    def load_corpora(self) -> dict[str, Corpus]:
        """All splits, standardized with statistics fitted on the train split."""
        if self._corpora is None:
            raw = self._raw_corpora()
            self._standardizer = FeatureStandardizer.fit(raw["train"])
            self._corpora = {name: self._standardizer.apply(c) for name, c in raw.items()}
        return self._corpora

    @property
    def test_corpora(self) -> list[Corpus]:
        return [c for name, c in self.load_corpora().items() if name.startswith("test")]

    def synthesize(self, output_dir: Path, progress_callback: Optional[ProgressCallback] = None) -> dict[str, Path]:
        """Write raw (unstandardized) synthetic corpora as `<split>.corpus` files."""
        update = self._progress(progress_callback)
        task = generate_task(self.config.task)
        paths = {}
        for name, corpus in task.corpora.items():
            paths[name] = write_corpus(corpus, Path(output_dir) / f"{name}.corpus")
            update("SYNTH", f"{name}: {len(corpus)} utterances -> {paths[name]}")
        return paths

    # -- cohort -------------------------------------------------------------

    def build_students(self, config: Optional[RunConfig] = None) -> list[Student]:
        config = config or self.config
        train = self.load_corpora()["train"]
        vocab = config.task.vocab_size if config.data_dir is None else _vocab_of(self.load_corpora())
        students = []
        for k, spec in enumerate(config.students):
            model_cfg = config.models[spec.model].model_copy(
                update={"vocab_size": vocab, "feature_dim": train.feature_dim}
            )
            seed = spec.seed if spec.seed is not None else student_seed(config.seed, k)
            students.append(Student.create(k, seed, model_cfg, config.trainer, spec.model, spec.compact))
        return students

    def _teacher(self, config: RunConfig) -> Optional[ModelParams]:
        if config.objective.method != "kd":
            return None
        if config.objective.teacher_checkpoint is None:
            raise ConfigError("objective 'kd' needs objective.teacher_checkpoint")
        params, _ = load_checkpoint(config.objective.teacher_checkpoint)
        return params

    def train(
        self,
        config: Optional[RunConfig] = None,
        output_dir: Optional[Path] = None,
        progress_callback: Optional[ProgressCallback] = None,
    ) -> RunOutcome:
        """Train a cohort, select the model to keep and record the choice."""
        config = config or self.config
        output_dir = Path(output_dir or self.output_dir)
        update = self._progress(progress_callback)
        corpora = self.load_corpora()
        write_run_config(config, output_dir)

        students = self.build_students(config)
        update("TRAIN", f"{len(students)} student(s), objective: {config.objective.describe()}")
        trainer = CohortTrainer(
            students,
            config.objective,
            config.trainer.model_copy(update={"workers": self.workers}),
            spec_augment=config.spec_augment,
            sampling=config.sampling,
            teacher=self._teacher(config),
            shuffle_seed=config.seed,
            standardizer=self._standardizer,
        )
        result = trainer.train(corpora["train"], corpora["valid"], output_dir, update)
        selection = select_model(result.checkpoints, config.trainer.selection)
        marker = {
            "student": selection.info.student,
            "checkpoint": str(selection.info.path.relative_to(output_dir)),
            "valid_loss": selection.info.valid_loss,
            "epoch": selection.info.epoch,
            "selection": config.trainer.selection,
        }
        (output_dir / "selected.json").write_text(json.dumps(marker, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        update("SELECT", f"student {selection.info.student} (valid loss {selection.info.valid_loss:.4f})")
        return RunOutcome(output_dir, result, selection)

    def evaluate(
        self,
        params: ModelParams,
        corpora: list[Corpus],
        output_dir: Path,
        beam: Optional[int] = None,
        progress_callback: Optional[ProgressCallback] = None,
    ) -> list[CorpusReport]:
        beam = beam or self.config.decode.beam
        update = self._progress(progress_callback)
        reports = []
        for corpus in corpora:
            report = evaluate_corpus(params, corpus, beam, self.config.decode.max_len, self.workers)
            stem = Path(output_dir) / "reports" / f"{corpus.name}.beam{beam}"
            write_report(report, stem.with_suffix(".csv"), stem.with_suffix(".json"))
            update("EVALUATE", f"{corpus.name}: CER {report.cer:.4f} (beam {beam}) -> {stem}.csv")
            reports.append(report)
        return reports

    def run(self, progress_callback: Optional[ProgressCallback] = None) -> RunOutcome:
        """Train, select and evaluate on every test split."""
        outcome = self.train(progress_callback=progress_callback)
        outcome.reports = self.evaluate(outcome.selection.params, self.test_corpora, outcome.output_dir, progress_callback=progress_callback)
        self._progress(progress_callback)("COMPLETE", f"run written to {outcome.output_dir}")
        return outcome

    # -- comparison grid ----------------------------------------------------

    def grid_rows(self) -> list[GridRow]:
        compare = self.config.compare
        return table1_rows() if compare.grid == "table1" else list(compare.rows)

    def row_config(self, row: GridRow, teacher: Optional[Path] = None) -> RunConfig:
        """Derive the run configuration of one grid row from the base config."""
        compare = self.config.compare
        for name in (compare.large_model, compare.compact_model):
            if name not in self.config.models:
                raise ConfigError(f"compare refers to unknown model '{name}'")
        large = StudentSpec(model=compare.large_model)
        compact = StudentSpec(model=compare.compact_model, compact=True)
        if row.setup == "large":
            students = [large] * (compare.large_students if row.method == "dml" else 1)
        elif row.method == "dml":
            students = [compact] + [large] * compare.compact_peers
        else:
            students = [compact]
        objective = self.config.objective.model_copy(update={
            "method": row.method,
            "label_smoothing": row.label_smoothing,
            "scheduled_sampling": row.scheduled_sampling,
            "spec_augment": row.spec_augment,
            "teacher_checkpoint": teacher,
        })
        trainer = self.config.trainer.model_copy(update={"selection": "compact" if row.setup == "compact" else "best"})
        return self.config.model_copy(update={"students": students, "objective": objective, "trainer": trainer})

    def compare(self, progress_callback: Optional[ProgressCallback] = None) -> Path:
        """Train and evaluate every grid row; write one CER row per configuration."""
        update = self._progress(progress_callback)
        rows = self.grid_rows()
        grid_dir = self.output_dir / "compare"
        tests = self.test_corpora
        selected: dict[str, Path] = {}
        table = []
        for row in sorted(rows, key=lambda r: r.method == "kd"):
            teacher = None
            if row.method == "kd":
                source = next(
                    (r for r in rows if r.setup == "large" and r.method == "independent" and r.techniques == row.techniques),
                    None,
                )
                if source is None or source.name not in selected:
                    raise ConfigError(f"row '{row.name}' needs a large independent row with the same techniques as teacher")
                teacher = selected[source.name]
            update("COMPARE", f"row {row.name}")
            outcome = self.train(self.row_config(row, teacher), grid_dir / row.name, progress_callback)
            selected[row.name] = outcome.selection.info.path
            reports = self.evaluate(outcome.selection.params, tests, outcome.output_dir, progress_callback=progress_callback)
            table.append((row, reports))

        order = {r.name: i for i, r in enumerate(rows)}
        table.sort(key=lambda item: order[item[0].name])
        path = grid_dir / "comparison.csv"
        header = ["configuration", "setup", "method", "ls", "ss", "sa", *[c.name for c in tests]]
        lines = [",".join(header)]
        for row, reports in table:
            flags = ["1" if on else "0" for on in row.techniques]
            lines.append(",".join([row.name, row.setup, row.method, *flags, *[f"{r.cer:.6f}" for r in reports]]))
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        update("COMPLETE", f"comparison grid ({len(table)} rows) -> {path}")
        return path

    # -- helpers ------------------------------------------------------------

    @staticmethod
    def _progress(progress_callback: Optional[ProgressCallback]) -> ProgressCallback:
        def update_progress(stage: str, message: str):
            logger.info(f"[{stage}] {message}")
            if progress_callback:
                progress_callback(stage, message)

        return update_progress


def _vocab_of(corpora: dict[str, Corpus]) -> int:
    for corpus in corpora.values():
        if corpus.task is not None:
            return corpus.task.vocab_size
    largest = max((int(u.tokens.max()) for c in corpora.values() for u in c if len(u.tokens)), default=3)
    return largest + 1
