"""Greedy and beam-search decoding, edit distance and corpus CER reports."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .data import Corpus
from .model import EOS, NUM_SPECIAL, ModelParams, Seq2SeqTransformer, SOS, subsampled_length
from .numcore import Tensor
from ..utils.exceptions import ContractError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # emitted tokens, EOS included once finished
    log_prob: float
    finished: bool = False

    @property
    def transcript(self) -> list[int]:
        return list(self.tokens[:-1] if self.finished else self.tokens)


def _sort_key(h: Hypothesis) -> tuple:
    # highest score first; ties go to the smaller last token, then the shorter prefix
    return (-h.log_prob, h.tokens[-1] if h.tokens else -1, len(h.tokens), h.tokens)


def default_max_len(num_frames: int) -> int:
    return 2 * (subsampled_length(num_frames) + 2)


class _Decoder:
    """Encodes one utterance once, then scores prefixes against the cached memory."""

    def __init__(self, params: ModelParams, features: np.ndarray):
        self.model = Seq2SeqTransformer(params.frozen())
        feats = Tensor(np.asarray(features, dtype=np.float64)[None])
        self.num_frames = feats.shape[1]
        self.memory, self.memory_mask = self.model.encode(feats, np.ones((1, self.num_frames), dtype=bool))
        self.vocab_size = params.config.vocab_size

    def next_log_probs(self, prefixes: Sequence[tuple[int, ...]]) -> np.ndarray:
        """Log-distribution of the next token after each equal-length prefix: [H × V]."""
        n = len(prefixes)
        inputs = np.array([[SOS, *p] for p in prefixes], dtype=np.int64)
        memory = Tensor(np.repeat(self.memory.data, n, axis=0))
        mask = np.repeat(self.memory_mask, n, axis=0)
        logits = self.model.decoder_forward(inputs, memory, mask)
        return nc.log_softmax_rows(logits).data[:, -1, :]

    def allowed_tokens(self, final: bool) -> np.ndarray:
        if final:
            return np.array([EOS])
        return np.concatenate([[EOS], np.arange(NUM_SPECIAL, self.vocab_size)])


def beam_search(
    params: ModelParams,
    features: np.ndarray,
    beam: int,
    max_len: Optional[int] = None,
) -> Hypothesis:
    """Highest-scoring complete hypothesis under a beam of the given width.

    Scores are summed log-probabilities (EOS included) with no length
    normalization. At `max_len` emitted tokens only EOS may follow.
    """
    if beam < 1:
        raise ContractError(f"beam must be >= 1, got {beam}")
    decoder = _Decoder(params, features)
    if max_len is None:
        max_len = default_max_len(decoder.num_frames)
    if max_len < 0:
        raise ContractError(f"max_len must be >= 0, got {max_len}")

    active = [Hypothesis((), 0.0)]
    finished: list[Hypothesis] = []
    for length in range(max_len + 1):
        log_probs = decoder.next_log_probs([h.tokens for h in active])
        allowed = decoder.allowed_tokens(final=length == max_len)
        candidates = [
            Hypothesis(h.tokens + (int(tok),), h.log_prob + float(row[tok]), bool(tok == EOS))
            for h, row in zip(active, log_probs)
            for tok in allowed
        ]
        candidates.sort(key=_sort_key)
        kept = candidates[:beam]
        finished.extend(h for h in kept if h.finished)
        active = [h for h in kept if not h.finished]
        if not active:
            break
        if finished:
            best_done = max(h.log_prob for h in finished)
            # extensions only lower a score, so nothing active can overtake
            if all(h.log_prob < best_done for h in active):
                break
    return min(finished, key=_sort_key)


def greedy_decode(params: ModelParams, features: np.ndarray, max_len: Optional[int] = None) -> Hypothesis:
    """Argmax decoding; identical to `beam_search` with beam=1."""
    decoder = _Decoder(params, features)
    if max_len is None:
        max_len = default_max_len(decoder.num_frames)
    tokens: tuple[int, ...] = ()
    score = 0.0
    for length in range(max_len + 1):
        row = decoder.next_log_probs([tokens])[0]
        allowed = decoder.allowed_tokens(final=length == max_len)
        tok = int(allowed[np.argmax(row[allowed])])
        tokens += (tok,)
        score += float(row[tok])
        if tok == EOS:
            break
    return Hypothesis(tokens, score, finished=True)


def sequence_log_prob(params: ModelParams, features: np.ndarray, tokens: Sequence[int]) -> float:
    """Teacher-forced log-probability of `tokens` followed by EOS."""
    model = Seq2SeqTransformer(params.frozen())
    inputs = np.array([SOS, *tokens], dtype=np.int64)
    targets = np.array([*tokens, EOS], dtype=np.int64)
    feats = Tensor(np.asarray(features, dtype=np.float64)[None])
    logits = model.forward_logits(feats, np.ones((1, feats.shape[1]), dtype=bool), inputs[None])
    log_probs = nc.log_softmax_rows(logits).data[0]
    return float(log_probs[np.arange(len(targets)), targets].sum())


# ---------------------------------------------------------------------------
# Error rates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def cer(self) -> float:
        return self.errors / self.ref_length


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> EditCounts:
    """Levenshtein alignment with substitution/insertion/deletion counts.

    On equal cost the backtrace prefers match or substitution, then deletion,
    then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ContractError("reference must not be empty")
    r, h = len(ref), len(hyp)
    dist = np.zeros((r + 1, h + 1), dtype=np.int64)
    dist[:, 0] = np.arange(r + 1)
    dist[0, :] = np.arange(h + 1)
    for i in range(1, r + 1):
        for j in range(1, h + 1):
            diag = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(diag, dist[i - 1, j] + 1, dist[i, j - 1] + 1)

    subs = ins = dels = 0
    i, j = r, h
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(subs, ins, dels, r)


@dataclass(frozen=True)
class UtteranceResult:
    uid: str
    reference: list[int]
    hypothesis: list[int]
    counts: EditCounts
    log_prob: float


@dataclass
class CorpusReport:
    corpus: str
    beam: int
    utterances: list[UtteranceResult]

    @property
    def errors(self) -> int:
        return sum(u.counts.errors for u in self.utterances)

    @property
    def ref_length(self) -> int:
        return sum(u.counts.ref_length for u in self.utterances)

    @property
    def cer(self) -> float:
        """Micro-average: total edits over total reference length."""
        return self.errors / self.ref_length

    def summary(self) -> dict:
        return {
            "corpus": self.corpus,
            "beam": self.beam,
            "utterances": len(self.utterances),
            "ref_length": self.ref_length,
            "substitutions": sum(u.counts.substitutions for u in self.utterances),
            "insertions": sum(u.counts.insertions for u in self.utterances),
            "deletions": sum(u.counts.deletions for u in self.utterances),
            "cer": self.cer,
        }


def evaluate_corpus(
    params: ModelParams,
    corpus: Corpus,
    beam: int,
    max_len: Optional[int] = None,
    workers: int = 1,
) -> CorpusReport:
    """Decode every utterance and score it against its reference."""
    if not len(corpus):
        raise ContractError(f"cannot evaluate empty corpus '{corpus.name}'")

    def _one(utt) -> UtteranceResult:
        hyp = greedy_decode(params, utt.features, max_len) if beam == 1 else beam_search(params, utt.features, beam, max_len)
        ref = [int(t) for t in utt.tokens]
        return UtteranceResult(utt.uid, ref, hyp.transcript, edit_distance(ref, hyp.transcript), hyp.log_prob)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, corpus.utterances))
    else:
        results = [_one(u) for u in corpus.utterances]
    report = CorpusReport(corpus.name, beam, results)
    logger.info(f"Evaluated {corpus.name}: beam={beam} utterances={len(results)} CER={report.cer:.4f}")
    return report


def write_report(report: CorpusReport, csv_path: Path, summary_path: Optional[Path] = None) -> Path:
    """Per-utterance CSV (uid, ref, hyp, S, I, D, cer) plus an optional JSON summary."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["utterance_id", "ref", "hyp", "S", "I", "D", "cer"])
        for u in report.utterances:
            writer.writerow([
                u.uid,
                " ".join(map(str, u.reference)),
                " ".join(map(str, u.hypothesis)),
                u.counts.substitutions,
                u.counts.insertions,
                u.counts.deletions,
                f"{u.counts.cer:.6f}",
            ])
    if summary_path is not None:
        Path(summary_path).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path
