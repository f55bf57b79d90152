"""N-best rescoring with the back-off model, score combination and hit-ratio statistics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .align import AlignmentError, BaselineAM, align_transcript
from .core import Alignment, DataError, DiagGmm, Segment, read_utterance_at
from .mphone import MPhoneKey, backoff_chain, encode_key, extract_maximal, order

logger = logging.getLogger(__name__)

DEFAULT_NBEST = 10


class Model(Protocol):
    def batch_lookup(self, keys: Iterable[str]) -> dict[str, DiagGmm]: ...


@dataclass(eq=False)
class NBestEntry:
    hypothesis: tuple[str, ...]
    lm_logprob: float
    symbols: list[str] | None = None
    alignment: Alignment | None = None

    @property
    def first_pass_am_loglik(self) -> float:
        if self.alignment is None:
            raise DataError("hypothesis has no alignment")
        return self.alignment.first_pass_total()


@dataclass(eq=False)
class NBestList:
    """All hypotheses for one utterance, in first-pass (input) rank order."""

    utterance_id: str
    frames: np.ndarray
    entries: list[NBestEntry]
    reference: tuple[str, ...] = ()


class HitMatrix:
    """Counts of scored segments by (left, right) context size of the M-phone used."""

    def __init__(self, M: int):
        self.M = M
        self.counts = np.zeros((M + 1, M + 1), dtype=np.int64)
        self.fallback_count = 0
        self.total = 0

    def add(self, hit: tuple[int, int] | None, n: int = 1):
        if hit is None:
            self.fallback_count += n
        else:
            self.counts[hit] += n
        self.total += n

    def merge(self, other: "HitMatrix"):
        if other.M != self.M:
            raise ValueError("cannot merge hit matrices of different orders")
        self.counts += other.counts
        self.fallback_count += other.fallback_count
        self.total += other.total

    def percentages(self) -> tuple[np.ndarray, float]:
        if self.total <= 0:
            raise ValueError("hit matrix is empty")
        return 100.0 * self.counts / self.total, 100.0 * self.fallback_count / self.total


def hit_ratio_report(h: HitMatrix) -> str:
    """Plain-text (left, right) percentage table plus the first-pass fallback share."""
    cells, fallback = h.percentages()
    head = "left, right " + "".join(f"{r:>9d}" for r in range(h.M + 1))
    lines = [head, "-" * len(head)]
    for l in range(h.M + 1):
        lines.append(f"{l:<12d}" + "".join(f"{cells[l, r]:>8.1f}%" for r in range(h.M + 1)))
    lines.append("-" * len(head))
    lines.append(f"fallback to first pass: {fallback:.1f}%  (segments: {h.total})")
    return "\n".join(lines)


@dataclass(frozen=True)
class SegmentScore:
    """Components of one segment's score; the back-off cost is applied later.

    ``loglik`` is the GMM log-likelihood of the segment's frames under the
    M-phone used (or the stored first-pass score on fallback);
    ``backoff_levels`` is ``M - o`` of that M-phone (``M`` on fallback).
    """

    loglik: float
    backoff_levels: int
    num_frames: int
    hit: tuple[int, int] | None

    def score(self, f_bo: float) -> float:
        return self.loglik - f_bo * self.backoff_levels * self.num_frames


def segment_keys(entry: NBestEntry, M: int) -> list[MPhoneKey]:
    return [k for k, _ in extract_maximal(entry.alignment, entry.symbols, M)]


def collect_pool(nbest: Sequence[NBestEntry], M: int) -> set[str]:
    """Encoded maximal keys and their full back-off chains over every hypothesis."""
    pool = set()
    for entry in nbest:
        if entry.alignment is None:
            continue
        for key in segment_keys(entry, M):
            pool.add(encode_key(key, M))
            pool.update(encode_key(b, M) for b in backoff_chain(key))
    return pool


def rescore_segment(
    segment: Segment, key: MPhoneKey, frames: np.ndarray, retrieved: dict[str, DiagGmm], M: int
) -> SegmentScore:
    """Score a segment with the highest-order retrieved M-phone in its chain."""
    n = segment.num_frames
    for cand in [key, *backoff_chain(key)]:
        gmm = retrieved.get(encode_key(cand, M))
        if gmm is not None:
            ll = float(gmm.loglik(frames[segment.start_frame : segment.end_frame]).sum())
            return SegmentScore(ll, M - order(cand), n, cand.shape)
    return SegmentScore(float(segment.first_pass_loglik.sum()), M, n, None)


def combine_scores(first_pass_am: float, bam_am: float, lm: float, lam: float, w_lm: float) -> float:
    """Log-linear AM interpolation scaled by 1/w_LM, plus the LM score."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    if w_lm <= 0:
        raise ValueError("LM weight must be positive")
    am = lam * first_pass_am
    if lam < 1.0:
        am += (1.0 - lam) * bam_am
    return am / w_lm + lm


@dataclass
class HypothesisScore:
    rank: int
    entry: NBestEntry
    first_pass: float
    lm: float
    segments: list[SegmentScore] = field(default_factory=list)

    def bam(self, f_bo: float) -> float:
        return sum(s.score(f_bo) for s in self.segments)

    def total(self, lam: float, w_lm: float, f_bo: float) -> float:
        bam = self.bam(f_bo) if lam < 1.0 else 0.0
        return combine_scores(self.first_pass, bam, self.lm, lam, w_lm)


def score_nbest(nbest: NBestList, model: Model, M: int) -> tuple[list[HypothesisScore], HitMatrix]:
    """Pool, batch-look-up and score every aligned hypothesis of one utterance.

    The result does not depend on lambda, w_LM or f_bo, so one call serves
    any number of parameter settings.
    """
    usable = []
    for rank, entry in enumerate(nbest.entries):
        if entry.alignment is None or entry.symbols is None:
            logger.warning("%s: dropping hypothesis %d without alignment", nbest.utterance_id, rank)
            continue
        usable.append((rank, entry))
    retrieved = model.batch_lookup(collect_pool([e for _, e in usable], M))
    hits = HitMatrix(M)
    out = []
    for rank, entry in usable:
        hs = HypothesisScore(rank, entry, entry.first_pass_am_loglik, entry.lm_logprob)
        for seg, key in zip(entry.alignment.segments, segment_keys(entry, M)):
            s = rescore_segment(seg, key, nbest.frames, retrieved, M)
            hits.add(s.hit)
            hs.segments.append(s)
        out.append(hs)
    return out, hits


def order_hypotheses(scores: Sequence[HypothesisScore], lam: float, w_lm: float, f_bo: float) -> list[HypothesisScore]:
    """Descending combined score; ties keep the original N-best rank."""
    return sorted(scores, key=lambda h: (-h.total(lam, w_lm, f_bo), h.rank))


def rerank(
    nbest: NBestList, model: Model, M: int, lam: float, w_lm: float, f_bo: float
) -> tuple[list[HypothesisScore], HitMatrix]:
    if f_bo < 0:
        raise ValueError("back-off cost must be non-negative")
    scores, hits = score_nbest(nbest, model, M)
    return order_hypotheses(scores, lam, w_lm, f_bo), hits


# --- N-best files ----------------------------------------------------------------

def write_nbest(path, records: Iterable[dict]) -> None:
    """records: {"id", "frames_ref", "entries": [{"words", "lm_logprob"}]}."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_nbest_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["id"], rec["frames_ref"], rec["entries"]
            except (ValueError, KeyError) as e:
                raise DataError(f"{path}:{lineno}: bad N-best record ({e})") from None
            out.append(rec)
    return out


def align_nbest(
    utterance_id: str,
    utt,
    entries: Sequence[dict],
    lexicon,
    baseline: BaselineAM,
    word_boundary: bool,
) -> NBestList:
    out = []
    for e in entries:
        entry = NBestEntry(tuple(e["words"]), float(e["lm_logprob"]))
        try:
            entry.symbols, entry.alignment = align_transcript(utt, entry.hypothesis, lexicon, baseline, word_boundary)
        except (AlignmentError, DataError) as err:
            logger.warning("%s: cannot align %r: %s", utterance_id, " ".join(entry.hypothesis), err)
        out.append(entry)
    return NBestList(utterance_id, utt.frames, out, utt.transcript)


def load_nbest(path, corpus_path, lexicon, baseline: BaselineAM, word_boundary: bool) -> list[NBestList]:
    """Read an N-best file and align every hypothesis against its utterance's frames."""
    lists = []
    for rec in read_nbest_records(path):
        utt = read_utterance_at(corpus_path, int(rec["frames_ref"]))
        if utt.id != rec["id"]:
            raise DataError(f"{path}: frames_ref of {rec['id']!r} points at utterance {utt.id!r}")
        lists.append(align_nbest(rec["id"], utt, rec["entries"], lexicon, baseline, word_boundary))
    return lists
