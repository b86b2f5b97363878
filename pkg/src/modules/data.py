"""Synthetic speech-like transduction tasks, corpus files and padded batches.

Each token owns a fixed prototype feature vector; an utterance emits
`frames_per_token` noisy copies of the prototype for every token, so the
frame-rate compression the subsampler performs matches the task structure.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .model import EOS, NUM_SPECIAL, PAD, SOS
from ..utils.exceptions import ConfigError, CorpusParseError
from ..utils.seeding import PURPOSE_SHUFFLE, derive_rng

logger = logging.getLogger(__name__)

CORPUS_MAGIC = b"DMLCORP1"
CORPUS_VERSION = 1

_U32 = struct.Struct("<I")


class SyntheticTaskConfig(BaseModel):
    """Generator settings for the desk-scale stand-in for speech->text."""

    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(default=16, ge=4)
    feature_dim: int = Field(default=8, ge=1)
    frames_per_token: int = Field(default=4, ge=4)
    noise_std: float = Field(default=0.5, ge=0.0)
    min_tokens: int = Field(default=3, ge=1)
    max_tokens: int = Field(default=8, ge=1)
    train_size: int = Field(default=2000, ge=0)
    valid_size: int = Field(default=200, ge=0)
    test_size: int = Field(default=200, ge=0)
    num_test_sets: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _length_range(self) -> "SyntheticTaskConfig":
        if self.min_tokens > self.max_tokens:
            raise ValueError("min_tokens must not exceed max_tokens")
        return self

    def split_names(self) -> list[str]:
        return ["train", "valid", *[f"test{i + 1}" for i in range(self.num_test_sets)]]


@dataclass(frozen=True)
class Utterance:
    uid: str
    tokens: np.ndarray  # reference tokens, no SOS/EOS
    features: np.ndarray  # [M × feature_dim]

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Corpus:
    name: str
    feature_dim: int
    utterances: list[Utterance] = field(default_factory=list)
    task: Optional[SyntheticTaskConfig] = None

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def equals(self, other: "Corpus") -> bool:
        if self.feature_dim != other.feature_dim or len(self) != len(other):
            return False
        return all(
            np.array_equal(a.tokens, b.tokens) and np.array_equal(a.features, b.features)
            for a, b in zip(self.utterances, other.utterances)
        )


@dataclass
class SyntheticTask:
    config: SyntheticTaskConfig
    prototypes: np.ndarray  # [vocab_size × feature_dim]; rows of special tokens unused
    corpora: dict[str, Corpus]

    @property
    def train(self) -> Corpus:
        return self.corpora["train"]

    @property
    def valid(self) -> Corpus:
        return self.corpora["valid"]

    @property
    def tests(self) -> list[Corpus]:
        return [c for name, c in self.corpora.items() if name.startswith("test")]


def _draw_corpus(name: str, size: int, cfg: SyntheticTaskConfig, prototypes: np.ndarray, rng: np.random.Generator) -> Corpus:
    utterances = []
    for i in range(size):
        n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        tokens = rng.integers(NUM_SPECIAL, cfg.vocab_size, size=n).astype(np.int64)
        clean = np.repeat(prototypes[tokens], cfg.frames_per_token, axis=0)
        noise = rng.standard_normal(clean.shape)
        utterances.append(Utterance(f"{name}-{i:06d}", tokens, clean + cfg.noise_std * noise))
    return Corpus(name, cfg.feature_dim, utterances, task=cfg)


def generate_task(cfg: SyntheticTaskConfig) -> SyntheticTask:
    """Draw prototypes and all splits; every split has its own seed stream."""
    names = cfg.split_names()
    streams = np.random.SeedSequence(cfg.seed).spawn(1 + len(names))
    prototypes = np.random.default_rng(streams[0]).standard_normal((cfg.vocab_size, cfg.feature_dim))
    sizes = {"train": cfg.train_size, "valid": cfg.valid_size}
    corpora = {}
    for name, stream in zip(names, streams[1:]):
        size = sizes.get(name, cfg.test_size)
        corpora[name] = _draw_corpus(name, size, cfg, prototypes, np.random.default_rng(stream))
    logger.info(
        f"Synthesized task: vocab={cfg.vocab_size} feature_dim={cfg.feature_dim} "
        + " ".join(f"{n}={len(c)}" for n, c in corpora.items())
    )
    return SyntheticTask(cfg, prototypes, corpora)


def nearest_prototype_accuracy(corpus: Corpus, prototypes: np.ndarray, frames_per_token: int) -> float:
    """Fraction of frames whose nearest non-special prototype is their own token's."""
    candidates = prototypes[NUM_SPECIAL:]
    correct = 0
    total = 0
    for utt in corpus:
        labels = np.repeat(utt.tokens, frames_per_token)
        dists = ((utt.features[:, None, :] - candidates[None, :, :]) ** 2).sum(axis=-1)
        correct += int((dists.argmin(axis=1) + NUM_SPECIAL == labels).sum())
        total += labels.size
    return correct / total if total else 0.0


def expected_prototype_accuracy(prototypes: np.ndarray, noise_std: float) -> float:
    """Pairwise Gaussian-overlap estimate of nearest-prototype frame accuracy.

    For prototypes i, j at distance d the chance isotropic noise pushes a frame of
    i past their bisector is Q(d / 2σ); pairwise events are treated as independent.
    """
    candidates = prototypes[NUM_SPECIAL:]
    if noise_std == 0:
        return 1.0
    n = candidates.shape[0]
    per_class = []
    for i in range(n):
        p_correct = 1.0
        for j in range(n):
            if i == j:
                continue
            d = float(np.linalg.norm(candidates[i] - candidates[j]))
            p_correct *= 1.0 - 0.5 * math.erfc(d / (2.0 * noise_std) / math.sqrt(2.0))
        per_class.append(p_correct)
    return float(np.mean(per_class))


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureStandardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, corpus: Corpus) -> "FeatureStandardizer":
        if not len(corpus):
            raise ConfigError("cannot fit feature statistics on an empty corpus")
        frames = np.concatenate([u.features for u in corpus], axis=0)
        return cls(frames.mean(axis=0), np.maximum(frames.std(axis=0), 1e-8))

    @classmethod
    def from_lists(cls, mean: list[float], std: list[float]) -> "FeatureStandardizer":
        return cls(np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64))

    def to_lists(self) -> tuple[list[float], list[float]]:
        return [float(x) for x in self.mean], [float(x) for x in self.std]

    def apply(self, corpus: Corpus) -> Corpus:
        utterances = [replace(u, features=(u.features - self.mean) / self.std) for u in corpus]
        return Corpus(corpus.name, corpus.feature_dim, utterances, task=corpus.task)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    """Padded mini-batch. Token matrices exclude SOS/EOS; see `decoder_inputs`/`targets`."""

    uids: tuple[str, ...]
    features: np.ndarray  # [B × M_max × F]
    frame_mask: np.ndarray  # [B × M_max]
    tokens: np.ndarray  # [B × N_max], PAD beyond length
    token_mask: np.ndarray  # [B × N_max]

    @property
    def size(self) -> int:
        return len(self.uids)

    @property
    def token_lengths(self) -> np.ndarray:
        return self.token_mask.sum(axis=1)

    @property
    def decoder_inputs(self) -> np.ndarray:
        """[B × (N_max+1)]: SOS followed by the reference tokens, PAD beyond."""
        out = np.full((self.size, self.tokens.shape[1] + 1), PAD, dtype=np.int64)
        out[:, 0] = SOS
        out[:, 1:] = self.tokens
        return out

    @property
    def targets(self) -> np.ndarray:
        """[B × (N_max+1)]: reference tokens followed by EOS, PAD beyond."""
        out = np.full((self.size, self.tokens.shape[1] + 1), PAD, dtype=np.int64)
        out[:, :-1] = self.tokens
        out[np.arange(self.size), self.token_lengths] = EOS
        return out

    @property
    def target_mask(self) -> np.ndarray:
        positions = np.arange(self.tokens.shape[1] + 1)[None, :]
        return positions <= self.token_lengths[:, None]

    def with_features(self, features: np.ndarray) -> "Batch":
        return replace(self, features=features)


def collate(utterances: list[Utterance]) -> Batch:
    if not utterances:
        raise ConfigError("cannot build an empty batch")
    feature_dim = utterances[0].features.shape[1]
    m_max = max(u.num_frames for u in utterances)
    n_max = max(len(u.tokens) for u in utterances)
    b = len(utterances)
    features = np.zeros((b, m_max, feature_dim))
    frame_mask = np.zeros((b, m_max), dtype=bool)
    tokens = np.full((b, n_max), PAD, dtype=np.int64)
    token_mask = np.zeros((b, n_max), dtype=bool)
    for i, u in enumerate(utterances):
        features[i, : u.num_frames] = u.features
        frame_mask[i, : u.num_frames] = True
        tokens[i, : len(u.tokens)] = u.tokens
        token_mask[i, : len(u.tokens)] = True
    return Batch(tuple(u.uid for u in utterances), features, frame_mask, tokens, token_mask)


def make_batches(
    corpus: Corpus,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    epoch: int = 0,
) -> list[Batch]:
    """Split a corpus into padded batches; shuffled per (seed, epoch) when a seed is given."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not len(corpus):
        raise ConfigError(f"corpus '{corpus.name}' is empty")
    order = np.arange(len(corpus))
    if shuffle_seed is not None:
        order = derive_rng(shuffle_seed, PURPOSE_SHUFFLE, epoch).permutation(len(corpus))
    return [
        collate([corpus.utterances[i] for i in order[start:start + batch_size]])
        for start in range(0, len(corpus), batch_size)
    ]


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def _header_record(corpus: Corpus) -> bytes:
    record = {
        "name": corpus.name,
        "feature_dim": corpus.feature_dim,
        "task": corpus.task.model_dump(mode="json") if corpus.task is not None else None,
    }
    return json.dumps(record, sort_keys=True).encode("utf-8")


def encode_corpus(corpus: Corpus) -> bytes:
    header = _header_record(corpus)
    parts = [CORPUS_MAGIC, _U32.pack(CORPUS_VERSION), _U32.pack(len(header)), header, _U32.pack(len(corpus))]
    for u in corpus:
        if u.features.shape[1] != corpus.feature_dim:
            raise ConfigError(f"utterance {u.uid} has feature_dim {u.features.shape[1]}, corpus expects {corpus.feature_dim}")
        parts.append(_U32.pack(len(u.tokens)))
        parts.append(np.asarray(u.tokens, dtype="<u4").tobytes())
        parts.append(_U32.pack(u.num_frames))
        parts.append(np.asarray(u.features, dtype="<f8").tobytes())
    return b"".join(parts)


def write_corpus(corpus: Corpus, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_corpus(corpus))
    logger.info(f"Wrote corpus {corpus.name} ({len(corpus)} utterances) to {path}")
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CorpusParseError(f"truncated {what}: need {n} bytes, {len(self.blob) - self.offset} left", self.offset)
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_corpus(blob: bytes, default_name: str = "corpus") -> Corpus:
    if not blob:
        return Corpus(default_name, 0, [])
    r = _Reader(blob)
    if r.take(len(CORPUS_MAGIC), "magic") != CORPUS_MAGIC:
        raise CorpusParseError("bad magic bytes", 0)
    version_offset = r.offset
    version = r.u32("version")
    if version != CORPUS_VERSION:
        raise CorpusParseError(f"unsupported corpus version {version}", version_offset)
    header_len = r.u32("header length")
    header_offset = r.offset
    try:
        header = json.loads(r.take(header_len, "header").decode("utf-8"))
        task = SyntheticTaskConfig.model_validate(header["task"]) if header.get("task") else None
        name, feature_dim = str(header["name"]), int(header["feature_dim"])
    except (ValueError, KeyError, TypeError) as e:
        raise CorpusParseError(f"malformed header: {e}", header_offset) from e
    count = r.u32("utterance count")
    utterances = []
    for i in range(count):
        n_tokens = r.u32(f"token count of record {i}")
        tokens = np.frombuffer(r.take(4 * n_tokens, f"tokens of record {i}"), dtype="<u4").astype(np.int64)
        n_frames = r.u32(f"frame count of record {i}")
        raw = r.take(8 * n_frames * feature_dim, f"features of record {i}")
        features = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(n_frames, feature_dim)
        utterances.append(Utterance(f"{name}-{i:06d}", tokens, features))
    if r.offset != len(blob):
        raise CorpusParseError(f"{len(blob) - r.offset} trailing bytes after last record", r.offset)
    return Corpus(name, feature_dim, utterances, task=task)


def read_corpus(path: Path) -> Corpus:
    path = Path(path)
    corpus = decode_corpus(path.read_bytes(), default_name=path.stem)
    logger.debug(f"Read corpus {corpus.name} ({len(corpus)} utterances) from {path}")
    return corpus
