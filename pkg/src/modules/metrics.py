"""Per-step and per-epoch training records written as JSON lines."""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Iterator, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict


class StepRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["step"] = "step"
    step: int
    epoch: int
    student: int
    lr: float
    loss: float
    mle_term: float
    mimicry_term: Optional[float] = None
    grad_norm: float
    clipped: bool = False


class EpochRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["epoch"] = "epoch"
    epoch: int
    student: int
    valid_loss: float
    cer_greedy: float
    valid_mimicry: Optional[float] = None
    improved: bool = False


Record = Union[StepRecord, EpochRecord]


class MetricsWriter:
    """Append-only JSON-lines stream; truncated when opened for a new run."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")
        self._lock = threading.Lock()

    def write(self, record: Record) -> None:
        line = json.dumps(record.model_dump(mode="json"), sort_keys=True)
        with self._lock, self.path.open("a", encoding="utf-8") as f:
            f.write(line + "\n")


def read_metrics(path: Path) -> Iterator[Record]:
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            raw = json.loads(line)
            yield StepRecord.model_validate(raw) if raw.get("kind") == "step" else EpochRecord.model_validate(raw)
