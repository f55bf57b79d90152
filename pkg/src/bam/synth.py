"""Synthetic corpora whose emission means depend on neighbouring phones.

A ``SynthWorld`` (lexicon, unigram LM, confusion groups, emission
parameters) is fixed by ``SynthSpec.seed``; corpora for different splits
are drawn from it with independent seeds, so train/dev/test share one
generating model.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import Lexicon, save_transcripts, viterbi_align
from .core import CIState, DiagGmm, Utterance, write_corpus
from .mphone import SIL, STATES_PER_PHONE, WORD_BOUNDARY, phone_sequence, state_chain
from .rescore import DEFAULT_NBEST, write_nbest

DEFAULT_PHONES = ("aa", "b", "d", "eh", "f", "iy", "k", "m", "n", "ow", "s", "t")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    phones: tuple[str, ...] = DEFAULT_PHONES
    lexicon_size: int = 48
    context_depth: int = 1
    frames_per_state: tuple[int, int] = (2, 4)
    dim: int = 8
    pron_length: tuple[int, int] = (2, 4)
    words_per_utterance: tuple[int, int] = (2, 4)
    group_size: int = 4
    base_scale: float = 1.0
    context_scale: float = 1.0
    noise_scale: float = 2.0
    # whether word boundaries occupy context positions for the generator
    word_boundary: bool = False
    nbest: int = DEFAULT_NBEST

    def __post_init__(self):
        if self.context_depth < 0:
            raise ValueError("context depth must be non-negative")
        if self.frames_per_state[0] < 1 or self.frames_per_state[0] > self.frames_per_state[1]:
            raise ValueError("bad frames-per-state range")
        if SIL in self.phones:
            raise ValueError("'sil' is reserved for sentence boundaries")


@dataclass
class SynthCorpus:
    utterances: list[Utterance]
    nbest: list[list[tuple[tuple[str, ...], float]]]
    # ground-truth state durations, parallel to the state chain of each reference
    durations: list[np.ndarray] = field(default_factory=list)


class _TrueEmissions:
    """Position-specific generator Gaussians, usable by ``viterbi_align``."""

    def __init__(self, world: "SynthWorld", symbols: Sequence[str]):
        self.gmms = []
        for pos, sym in enumerate(symbols):
            if sym == WORD_BOUNDARY:
                continue
            for s in range(1, STATES_PER_PHONE + 1):
                mean = world.true_mean(symbols, pos, s)
                var = np.full(world.spec.dim, world.spec.noise_scale**2)
                self.gmms.append(DiagGmm([1.0], mean, var))

    def emission_matrix(self, frames, chain):
        return np.stack([g.loglik(frames) for g in self.gmms], axis=1)


class SynthWorld:
    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0x5EED])
        self.lexicon, self.groups = self._make_lexicon(rng)
        words = sorted(self.lexicon)
        logits = rng.normal(0.0, 0.5, size=len(words))
        logp = logits - np.log(np.exp(logits).sum())
        self.words = words
        self.unigram = dict(zip(words, logp))
        self._probs = np.exp(logp)
        self._probs /= self._probs.sum()

        symbols = sorted(set(spec.phones) | {SIL, WORD_BOUNDARY})
        self.symbol_index = {s: i for i, s in enumerate(symbols)}
        states = [CIState(p, s) for p in sorted(set(spec.phones) | {SIL}) for s in range(1, STATES_PER_PHONE + 1)]
        self.state_index = {st: i for i, st in enumerate(states)}
        d = spec.dim
        self.base = rng.normal(0.0, spec.base_scale, size=(len(states), d))
        # shift[k, side, state, symbol] for context distance k+1; side 0 = left
        c = spec.context_depth
        self.shift = rng.normal(0.0, spec.context_scale, size=(c, 2, len(states), len(symbols), d))
        for k in range(c):
            self.shift[k] *= 0.5**k

    def _make_lexicon(self, rng):
        spec = self.spec
        phones = list(spec.phones)
        seen = set()
        prons = {}
        groups = []
        n_groups = -(-spec.lexicon_size // spec.group_size)
        attempts = 0
        while len(groups) < n_groups:
            attempts += 1
            if attempts > 100 * n_groups:
                raise ValueError("cannot build a homophone-free lexicon; use more phones or shorter words")
            length = int(rng.integers(spec.pron_length[0], spec.pron_length[1] + 1))
            base = tuple(str(p) for p in rng.choice(phones, size=length))
            members = []
            tries = 0
            while len(members) < spec.group_size and tries < 50:
                tries += 1
                pron = list(base)
                if members:
                    pos = int(rng.integers(length))
                    pron[pos] = phones[int(rng.integers(len(phones)))]
                pron = tuple(pron)
                if pron in seen:
                    continue
                seen.add(pron)
                members.append(pron)
            if len(members) < 2:
                continue
            group = []
            for pron in members:
                word = f"w{len(prons):03d}"
                prons[word] = pron
                group.append(word)
            groups.append(tuple(group))
        group_of = {w: g for g in groups for w in g}
        return Lexicon(prons), group_of

    def context(self, symbols: Sequence[str], pos: int, side: int) -> list[str]:
        """Nearest-first neighbours the generator conditions on (up to the context depth)."""
        seq = symbols if self.spec.word_boundary else [s for s in symbols if s != WORD_BOUNDARY]
        if not self.spec.word_boundary:
            pos = sum(1 for s in symbols[:pos] if s != WORD_BOUNDARY)
        c = self.spec.context_depth
        if side == 0:
            return list(seq[max(pos - c, 0) : pos])[::-1]
        return list(seq[pos + 1 : pos + 1 + c])

    def true_mean(self, symbols: Sequence[str], pos: int, state: int) -> np.ndarray:
        si = self.state_index[CIState(symbols[pos], state)]
        mean = self.base[si].copy()
        for side in (0, 1):
            for k, sym in enumerate(self.context(symbols, pos, side)):
                mean += self.shift[k, side, si, self.symbol_index[sym]]
        return mean

    def lm_logprob(self, words: Sequence[str]) -> float:
        return float(sum(self.unigram[w] for w in words))

    def sample_utterance(self, uid: str, rng: np.random.Generator) -> tuple[Utterance, np.ndarray]:
        spec = self.spec
        n = int(rng.integers(spec.words_per_utterance[0], spec.words_per_utterance[1] + 1))
        words = [self.words[i] for i in rng.choice(len(self.words), size=n, p=self._probs)]
        symbols = phone_sequence(words, self.lexicon, word_boundary=True)
        blocks = []
        durations = []
        for pos, sym in enumerate(symbols):
            if sym == WORD_BOUNDARY:
                continue
            for s in range(1, STATES_PER_PHONE + 1):
                dur = int(rng.integers(spec.frames_per_state[0], spec.frames_per_state[1] + 1))
                mean = self.true_mean(symbols, pos, s)
                blocks.append(mean + spec.noise_scale * rng.standard_normal((dur, spec.dim)))
                durations.append(dur)
        frames = np.concatenate(blocks).astype(np.float32)
        return Utterance(uid, words, frames), np.array(durations)

    def confusions(self, words: Sequence[str], n: int, rng: np.random.Generator) -> list[tuple[str, ...]]:
        """Up to n-1 distinct competitors made by substituting words within confusion groups."""
        ref = tuple(words)
        out = [ref]
        seen = {ref}
        for _ in range(20 * n):
            if len(out) >= n:
                break
            hyp = list(ref)
            k = 1 + int(rng.integers(min(2, len(ref))))
            for pos in rng.choice(len(ref), size=k, replace=False):
                alts = [w for w in self.groups[ref[pos]] if w != ref[pos]]
                hyp[pos] = alts[int(rng.integers(len(alts)))]
            hyp = tuple(hyp)
            if hyp not in seen:
                seen.add(hyp)
                out.append(hyp)
        return out

    def oracle_score(self, frames: np.ndarray, words: Sequence[str]) -> float:
        """Viterbi log-likelihood of ``frames`` under the true generator for ``words``."""
        symbols = phone_sequence(words, self.lexicon, word_boundary=True)
        ali = viterbi_align(frames, state_chain(symbols), _TrueEmissions(self, symbols))
        return ali.first_pass_total()


def split_seed(spec: SynthSpec, split: str) -> list[int]:
    return [spec.seed, zlib.crc32(split.encode("utf-8"))]


def synth_corpus(world: SynthWorld, n_utterances: int, split: str = "train") -> SynthCorpus:
    """Deterministic corpus for (world seed, split name)."""
    rng = np.random.default_rng(split_seed(world.spec, split))
    utts, nbests, durs = [], [], []
    for i in range(n_utterances):
        utt, dur = world.sample_utterance(f"{split}-{i:06d}", rng)
        hyps = world.confusions(utt.transcript, world.spec.nbest, rng)
        order = rng.permutation(len(hyps))
        nbests.append([(hyps[j], world.lm_logprob(hyps[j])) for j in order])
        utts.append(utt)
        durs.append(dur)
    return SynthCorpus(utts, nbests, durs)


def write_synth(directory, world: SynthWorld, corpus: SynthCorpus, prefix: str = "") -> dict[str, Path]:
    """Write corpus, lexicon, transcripts and N-best files; returns their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": d / f"{prefix}corpus.bamc",
        "lexicon": d / "lexicon.txt",
        "transcripts": d / f"{prefix}transcripts.txt",
        "nbest": d / f"{prefix}nbest.jsonl",
    }
    offsets = write_corpus(paths["corpus"], corpus.utterances, world.spec.dim)
    world.lexicon.save(paths["lexicon"])
    save_transcripts(paths["transcripts"], ((u.id, u.transcript) for u in corpus.utterances))
    write_nbest(
        paths["nbest"],
        (
            {
                "id": u.id,
                "frames_ref": off,
                "entries": [{"words": list(w), "lm_logprob": lp} for w, lp in nb],
            }
            for u, off, nb in zip(corpus.utterances, offsets, corpus.nbest)
        ),
    )
    return paths
