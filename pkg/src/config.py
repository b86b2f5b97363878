"""Configuration management for dml-seq2seq.

Two layers: `Settings` holds machine-level defaults read from the environment
(`DMLSEQ_*`, optionally via `.env`), and `RunConfig` describes one experiment
and is read from a YAML file.
"""

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .modules.augment import SamplingSchedule, SpecAugmentConfig
from .modules.data import SyntheticTaskConfig
from .modules.gradcheck import GradcheckConfig
from .modules.model import ModelConfig
from .modules.objectives import ObjectiveConfig
from .modules.trainer import TrainerConfig
from .utils.exceptions import ConfigError
from .utils.project_root import resolve_env_file, resolve_from_root


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="DMLSEQ_",
        env_file=str(resolve_env_file()),
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Relative paths resolve against the project root, never the working directory
    output_dir: Path = Field(default=Path("./runs"), description="Root for run directories")
    workers: int = Field(default=1, ge=1, description="Default thread-pool size for cohort forwards and decoding")
    log_level: str = Field(default="INFO", description="Stream handler level")

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.output_dir = resolve_from_root(self.output_dir)


def get_settings() -> Settings:
    """Get application settings."""
    return Settings()


class StudentSpec(BaseModel):
    """One cohort member: which model configuration it uses and how it is seeded."""

    model_config = ConfigDict(extra="forbid")

    model: str = "large"
    seed: Optional[int] = Field(default=None, ge=0)
    compact: bool = False


class DecodeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beam: int = Field(default=20, ge=1)
    max_len: Optional[int] = Field(default=None, ge=0)


class GridRow(BaseModel):
    """One configuration of a comparison grid."""

    model_config = ConfigDict(extra="forbid")

    name: str
    setup: Literal["large", "compact"] = "large"
    method: Literal["independent", "dml", "kd"] = "independent"
    label_smoothing: bool = False
    scheduled_sampling: bool = False
    spec_augment: bool = False

    @property
    def techniques(self) -> tuple[bool, bool, bool]:
        return (self.label_smoothing, self.scheduled_sampling, self.spec_augment)


class CompareConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: Literal["table1", "custom"] = "table1"
    rows: list[GridRow] = Field(default_factory=list)
    large_model: str = "large"
    compact_model: str = "compact"
    large_students: int = Field(default=4, ge=2)
    compact_peers: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _custom_has_rows(self) -> "CompareConfig":
        if self.grid == "custom" and not self.rows:
            raise ValueError("grid 'custom' needs at least one row")
        names = [r.name for r in self.rows]
        if len(names) != len(set(names)):
            raise ValueError("grid row names must be unique")
        return self


def _default_models() -> dict[str, ModelConfig]:
    return {
        "large": ModelConfig(),
        "compact": ModelConfig(num_encoder_blocks=2, num_decoder_blocks=1),
    }


class RunConfig(BaseModel):
    """A complete experiment description."""

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    seed: int = Field(default=0, ge=0)
    output_dir: Optional[Path] = None
    task: SyntheticTaskConfig = Field(default_factory=SyntheticTaskConfig)
    data_dir: Optional[Path] = None
    models: dict[str, ModelConfig] = Field(default_factory=_default_models)
    students: list[StudentSpec] = Field(default_factory=lambda: [StudentSpec(), StudentSpec()])
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    spec_augment: SpecAugmentConfig = Field(default_factory=SpecAugmentConfig)
    sampling: SamplingSchedule = Field(default_factory=SamplingSchedule)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    compare: CompareConfig = Field(default_factory=CompareConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)

    @model_validator(mode="after")
    def _cohort_is_consistent(self) -> "RunConfig":
        if not self.students:
            raise ValueError("students must list at least one student")
        for spec in self.students:
            if spec.model not in self.models:
                raise ValueError(f"student refers to unknown model '{spec.model}'")
        if self.objective.method == "dml" and self.objective.lambda_ > 0 and len(self.students) < 2:
            raise ValueError("objective 'dml' with lambda > 0 needs at least two students")
        if self.trainer.selection == "compact" and not any(s.compact for s in self.students):
            raise ValueError("selection 'compact' needs a student marked compact")
        return self

    def resolved_output_dir(self, settings: Settings) -> Path:
        if self.output_dir is None:
            return settings.output_dir
        return resolve_from_root(self.output_dir)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json", by_alias=True), sort_keys=True)


def _format_validation_error(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        where = ".".join(str(p) for p in err.get("loc", ())) or "<root>"
        lines.append(f"- {where}: {err.get('msg')}")
    return "\n".join(lines)


def build_run_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw or {})
    except ValidationError as e:
        raise ConfigError("Invalid configuration:\n" + _format_validation_error(e)) from e


def load_run_config(path: Optional[Path], overrides: Optional[dict] = None) -> RunConfig:
    """Read a YAML run config (or defaults when `path` is None) and apply dotted overrides.

    `overrides` maps dotted keys such as "trainer.max_epochs" to values; None values
    are skipped.
    """
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return build_run_config(raw)


def write_run_config(config: RunConfig, output_dir: Path) -> Path:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / "config.yaml"
    path.write_text(config.to_yaml(), encoding="utf-8")
    return path
