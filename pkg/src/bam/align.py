"""Lexicon, CI-phone baseline acoustic model, linear-chain Viterbi alignment and WER."""

from __future__ import annotations

import logging
import math
import warnings
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import DEFAULT_VARIANCE_FLOOR, Alignment, CIState, DataError, DiagGmm, Segment, Utterance
from .gmm import DEFAULT_EM_ITERATIONS, VarmixParams, estimate_gmm, varmix_size
from .mphone import SIL, STATES_PER_PHONE, check_phone_symbol, phone_sequence, state_chain

logger = logging.getLogger(__name__)

LOG_HALF = math.log(0.5)


class AlignmentError(DataError):
    pass


class Lexicon(Mapping[str, tuple[str, ...]]):
    """Word -> pronunciation map; ``phones`` always includes ``sil``."""

    def __init__(self, prons: Mapping[str, Sequence[str]]):
        self._prons = {}
        phones = {SIL}
        for word, pron in prons.items():
            pron = tuple(pron)
            if not pron:
                raise DataError(f"empty pronunciation for {word!r}")
            for p in pron:
                check_phone_symbol(p)
            phones.update(pron)
            self._prons[word] = pron
        self.phones = tuple(sorted(phones))

    def __getitem__(self, word):
        return self._prons[word]

    def __iter__(self):
        return iter(self._prons)

    def __len__(self):
        return len(self._prons)

    @classmethod
    def load(cls, path) -> "Lexicon":
        prons = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                word, tab, pron = line.partition("\t")
                if not tab:
                    raise DataError(f"{path}:{lineno}: expected word<TAB>phones")
                if word in prons:
                    raise DataError(f"{path}:{lineno}: duplicate entry for {word!r}")
                prons[word] = pron.split()
        return cls(prons)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for word in sorted(self._prons):
                f.write(f"{word}\t{' '.join(self._prons[word])}\n")


def load_transcripts(path) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            uid, tab, words = line.partition("\t")
            if not tab:
                raise DataError(f"{path}:{lineno}: expected id<TAB>words")
            out[uid] = words.split()
    return out


def save_transcripts(path, transcripts: Iterable[tuple[str, Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for uid, words in transcripts:
            f.write(f"{uid}\t{' '.join(words)}\n")


class BaselineAM(Mapping[CIState, DiagGmm]):
    """First-pass context-independent model: one GMM per phone state."""

    def __init__(self, gmms: Mapping[CIState, DiagGmm]):
        self._gmms = dict(gmms)
        dims = {g.dim for g in self._gmms.values()}
        if len(dims) > 1:
            raise DataError(f"mixed dimensions in baseline model: {sorted(dims)}")
        self.dim = dims.pop() if dims else 0
        for st in self._gmms:
            for s in range(1, STATES_PER_PHONE + 1):
                if CIState(st.phone, s) not in self._gmms:
                    raise DataError(f"phone {st.phone!r} lacks state {s}")

    def __getitem__(self, state):
        return self._gmms[state]

    def __iter__(self):
        return iter(sorted(self._gmms))

    def __len__(self):
        return len(self._gmms)

    @property
    def phones(self) -> list[str]:
        return sorted({s.phone for s in self._gmms})

    def emission_matrix(self, frames: np.ndarray, chain: Sequence[CIState]) -> np.ndarray:
        """Log-likelihood of every frame under every chain state, shape (T, len(chain))."""
        uniq = {}
        cols = []
        for st in chain:
            if st not in uniq:
                try:
                    uniq[st] = self._gmms[st].loglik(frames)
                except KeyError:
                    raise AlignmentError(f"baseline model has no state {st}") from None
            cols.append(uniq[st])
        return np.stack(cols, axis=1)

    def save(self, path) -> None:
        from .store import write_shard

        write_shard(path, ((f"{st} /", self._gmms[st]) for st in self), shard_index=0, M=0, D=self.dim, S=1)

    @classmethod
    def load(cls, path) -> "BaselineAM":
        from .store import ModelShard

        with ModelShard(path) as shard:
            if shard.M != 0:
                raise DataError(f"{path}: not a baseline model (order {shard.M})")
            return cls({CIState.parse(k.split(" ")[0]): g for k, g in shard.items()})


def viterbi_align(frames: np.ndarray, chain: Sequence[CIState], am: BaselineAM, utterance_id: str = "") -> Alignment:
    """Best monotone left-to-right assignment of frames to chain states.

    Every state takes at least one frame; self-loops and advances both
    cost ln(0.5). Ties prefer staying in the current state.
    """
    frames = np.asarray(frames)
    T, S = frames.shape[0], len(chain)
    if S == 0:
        raise AlignmentError(f"{utterance_id}: empty state chain")
    if T < S:
        raise AlignmentError(f"{utterance_id}: {T} frames cannot cover {S} states")
    emit = am.emission_matrix(frames, chain)
    delta = np.full(S, -np.inf)
    delta[0] = emit[0, 0]
    advanced = np.zeros((T, S), dtype=bool)
    prev = np.empty(S)
    for t in range(1, T):
        prev[0] = -np.inf
        prev[1:] = delta[:-1]
        adv = prev > delta
        advanced[t] = adv
        delta = np.where(adv, prev, delta) + (LOG_HALF + emit[t])
    if not np.isfinite(delta[-1]):
        raise AlignmentError(f"{utterance_id}: no finite alignment path")
    bounds = [T]
    j = S - 1
    for t in range(T - 1, 0, -1):
        if advanced[t, j]:
            bounds.append(t)
            j -= 1
    bounds.append(0)
    bounds.reverse()
    segs = [
        Segment(chain[k], bounds[k], bounds[k + 1], emit[bounds[k] : bounds[k + 1], k])
        for k in range(S)
    ]
    return Alignment(utterance_id, tuple(segs))


def path_score(alignment: Alignment) -> float:
    """Emission log-likelihoods plus ln(0.5) per transition."""
    return alignment.first_pass_total() + (alignment.num_frames - 1) * LOG_HALF


def align_transcript(utt: Utterance, words: Sequence[str], lexicon, am: BaselineAM, word_boundary: bool = False):
    """Returns (context symbols, alignment) for ``words`` against the utterance's frames."""
    symbols = phone_sequence(words, lexicon, word_boundary)
    return symbols, viterbi_align(utt.frames, state_chain(symbols), am, utt.id)


def _uniform_bounds(T: int, S: int) -> np.ndarray:
    return (np.arange(S + 1) * T) // S


class _Stats:
    def __init__(self, dim):
        self.n = 0
        self.s1 = np.zeros(dim)
        self.s2 = np.zeros(dim)
        self.frames: list[np.ndarray] = []

    def add(self, x: np.ndarray, keep: bool):
        x = x.astype(np.float64)
        self.n += x.shape[0]
        self.s1 += x.sum(axis=0)
        self.s2 += (x * x).sum(axis=0)
        if keep:
            self.frames.append(x)

    def gaussian(self, floor) -> DiagGmm:
        mean = self.s1 / self.n
        return DiagGmm([1.0], mean, np.maximum(self.s2 / self.n - mean * mean, floor))


def _inventory_states(lexicon: Lexicon) -> list[CIState]:
    return [CIState(p, s) for p in lexicon.phones for s in range(1, STATES_PER_PHONE + 1)]


def _reestimate(stats, states, fallback, floor):
    gmms = {}
    for st in states:
        acc = stats.get(st)
        gmms[st] = acc.gaussian(floor) if acc is not None and acc.n > 0 else fallback[st]
    return gmms


def train_baseline(
    corpus: Sequence[Utterance],
    lexicon: Lexicon,
    iterations: int,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    varmix: VarmixParams | None = None,
    em_iterations: int = DEFAULT_EM_ITERATIONS,
    history: list | None = None,
) -> BaselineAM:
    """Flat-start Viterbi training of single-Gaussian CI phone states.

    After ``iterations`` rounds of align + re-estimate, ``varmix``
    (optional) replaces each state's Gaussian with a mixture sized by the
    varmix rule, estimated on the final alignment. When ``history`` is a
    list it receives the corpus Viterbi score under the flat-start model
    and after every iteration (before any final mixture step).
    """
    if not corpus:
        raise DataError("cannot train a baseline on an empty corpus")
    dim = corpus[0].dim
    states = _inventory_states(lexicon)
    chains = [state_chain(phone_sequence(u.transcript, lexicon)) for u in corpus]

    total = _Stats(dim)
    stats: dict[CIState, _Stats] = {}
    for utt, chain in zip(corpus, chains):
        total.add(utt.frames, keep=False)
        if utt.frames.shape[0] < len(chain):
            continue
        b = _uniform_bounds(utt.frames.shape[0], len(chain))
        for k, st in enumerate(chain):
            stats.setdefault(st, _Stats(dim)).add(utt.frames[b[k] : b[k + 1]], keep=False)
    global_g = total.gaussian(variance_floor)
    missing = sorted({st.phone for st in states if st not in stats})
    if missing:
        warnings.warn(f"phones never observed, keeping flat-start parameters: {missing}", stacklevel=2)
    flat = _reestimate(stats, states, {st: global_g for st in states}, variance_floor)
    am = BaselineAM(flat)

    def align_pass(model, keep):
        acc_stats: dict[CIState, _Stats] = {}
        score = 0.0
        for utt, chain in zip(corpus, chains):
            try:
                ali = viterbi_align(utt.frames, chain, model, utt.id)
            except AlignmentError as e:
                logger.warning("skipping %s: %s", utt.id, e)
                continue
            score += path_score(ali)
            for seg in ali.segments:
                acc_stats.setdefault(seg.state, _Stats(dim)).add(
                    utt.frames[seg.start_frame : seg.end_frame], keep
                )
        return acc_stats, score

    for it in range(iterations):
        stats, score = align_pass(am, keep=varmix is not None and it == iterations - 1)
        if history is not None:
            history.append(score)
        am = BaselineAM(_reestimate(stats, states, flat, variance_floor))
    if history is not None:
        history.append(align_pass(am, keep=False)[1])

    if varmix is not None and iterations > 0:
        gmms = dict(am._gmms)
        for st, acc in stats.items():
            if acc.n:
                x = np.concatenate(acc.frames)
                gmms[st] = estimate_gmm(x, varmix_size(acc.n, varmix), em_iterations, variance_floor)
        am = BaselineAM(gmms)
    return am


def wer(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int, float]:
    """Unit-cost Levenshtein alignment -> (substitutions, deletions, insertions, WER %)."""
    if not ref:
        raise ValueError("reference must be non-empty")
    n, m = len(ref), len(hyp)
    # cost[i][j] = (errors, subs, dels, ins) aligning ref[:i] with hyp[:j]
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            e, s, d, ins = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = (e, s, d, ins)
            else:
                best = (e + 1, s + 1, d, ins)
            e, s, d, ins = prev[j]
            if e + 1 < best[0]:
                best = (e + 1, s, d + 1, ins)
            e, s, d, ins = cur[j - 1]
            if e + 1 < best[0]:
                best = (e + 1, s, d, ins + 1)
            cur.append(best)
        prev = cur
    errors, s, d, i = prev[m]
    return s, d, i, 100.0 * errors / n
