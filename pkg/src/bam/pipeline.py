"""Single-host MapReduce: mappers, a spilling shard/sort/collate shuffler, per-shard reducers.

The back-off model is trained by ``am_mapper`` / ``am_reducer`` on top of
the generic ``run_pipeline``.
"""

from __future__ import annotations

import heapq
import itertools
import os
import struct
import tempfile
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .align import AlignmentError, BaselineAM, align_transcript
from .core import DEFAULT_VARIANCE_FLOOR, DataError, DiagGmm, Utterance
from .gmm import DEFAULT_EM_ITERATIONS, Reservoir, VarmixParams, estimate_gmm, varmix_size
from .mphone import backoff_chain, decode_key, encode_key, extract_maximal, shard_of_encoded

DEFAULT_SPILL_BYTES = 64 << 20


class PipelineError(RuntimeError):
    pass


class ReducerInvariantError(PipelineError):
    """The reducer saw keys in an order the stack discipline cannot handle."""


class SkipRecord(Exception):
    """Raised by a mapper to drop a record; counted, not fatal."""


@dataclass(frozen=True)
class ReduceInput:
    key: bytes
    values: list[bytes]


MapperFn = Callable[[object], Iterable[tuple[bytes, bytes]]]
ReducerFn = Callable[[int, Iterator[ReduceInput]], Iterable[tuple[bytes, object]]]


# --- spill runs -------------------------------------------------------------------
# record: u32 key_len, key, u64 seq, u32 value_len, value

_RUN_HEAD = struct.Struct("<I")
_RUN_SEQ = struct.Struct("<QI")


def _write_run(path, items):
    with open(path, "wb") as f:
        for key, seq, value in items:
            f.write(_RUN_HEAD.pack(len(key)) + key + _RUN_SEQ.pack(seq, len(value)) + value)


def _read_run(path):
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                return
            (klen,) = _RUN_HEAD.unpack(head)
            key = f.read(klen)
            seq, vlen = _RUN_SEQ.unpack(f.read(12))
            yield key, seq, f.read(vlen)


class _Shuffler:
    """Per-shard buffers, spilled as sorted runs once the buffered bytes exceed a budget."""

    def __init__(self, S, sharder, spill_bytes, workdir):
        self.S = S
        self.sharder = sharder
        self.spill_bytes = spill_bytes
        self.workdir = workdir
        self.buffers = [[] for _ in range(S)]
        self.runs = [[] for _ in range(S)]
        self.buffered = 0
        self.seq = 0

    def add(self, key: bytes, value: bytes):
        if not key:
            raise PipelineError("mapper emitted an empty key")
        shard = self.sharder(key, self.S)
        if not 0 <= shard < self.S:
            raise PipelineError(f"sharder returned {shard} for {key!r}")
        self.buffers[shard].append((key, self.seq, value))
        self.seq += 1
        self.buffered += len(key) + len(value) + 64
        if self.buffered > self.spill_bytes:
            self.spill()

    def spill(self):
        for shard, buf in enumerate(self.buffers):
            if buf:
                buf.sort(key=lambda kv: (kv[0], kv[1]))
                path = os.path.join(self.workdir, f"s{shard:05d}-r{len(self.runs[shard]):05d}.run")
                _write_run(path, buf)
                self.runs[shard].append(path)
        self.buffers = [[] for _ in range(self.S)]
        self.buffered = 0

    def grouped(self, shard: int) -> Iterator[ReduceInput]:
        mem = sorted(self.buffers[shard], key=lambda kv: (kv[0], kv[1]))
        streams = [_read_run(p) for p in self.runs[shard]] + [iter(mem)]
        merged = heapq.merge(*streams, key=lambda kv: (kv[0], kv[1]))
        for key, group in itertools.groupby(merged, key=lambda kv: kv[0]):
            yield ReduceInput(key, [v for _, _, v in group])


def run_pipeline(
    records: Iterable,
    mapper_fn: MapperFn,
    sharder: Callable[[bytes, int], int],
    reducer_fn: ReducerFn,
    S: int,
    threads: int = 1,
    spill_bytes: int = DEFAULT_SPILL_BYTES,
    counters: Counter | None = None,
    workdir=None,
) -> list[list[tuple[bytes, object]]]:
    """Map every record, shuffle by ``sharder``, reduce each shard over sorted keys.

    Returns S tables; table i holds the reducer outputs of shard i in key
    order. Mapper output order (and hence the value order seen by the
    reducers) follows record order regardless of ``threads``.
    """
    if S < 1:
        raise ValueError("shard count must be at least 1")
    counters = counters if counters is not None else Counter()

    def map_one(item):
        idx, rec = item
        try:
            return idx, list(mapper_fn(rec)), None
        except SkipRecord as e:
            return idx, None, str(e)
        except Exception as e:
            raise PipelineError(f"mapper failed on record {idx} ({_describe(rec)}): {e}") from e

    with tempfile.TemporaryDirectory(prefix="bam-shuffle-", dir=workdir) as tmp:
        shuffler = _Shuffler(S, sharder, spill_bytes, tmp)
        if threads > 1:
            ex = ThreadPoolExecutor(threads)
            mapped = ex.map(map_one, enumerate(records), chunksize=1)
        else:
            ex = None
            mapped = map(map_one, enumerate(records))
        try:
            for idx, pairs, skipped in mapped:
                counters["records"] += 1
                if pairs is None:
                    counters["records_skipped"] += 1
                    continue
                for key, value in pairs:
                    shuffler.add(key, value)
                    counters["pairs_emitted"] += 1
        finally:
            if ex is not None:
                ex.shutdown()

        def reduce_shard(shard):
            out = []
            prev = None
            try:
                for key, value in reducer_fn(shard, shuffler.grouped(shard)):
                    if prev is not None and key <= prev:
                        raise PipelineError(f"shard {shard}: reducer output {key!r} not after {prev!r}")
                    prev = key
                    out.append((key, value))
            except PipelineError:
                raise
            except Exception as e:
                raise PipelineError(f"reducer failed on shard {shard}: {e}") from e
            return out

        if threads > 1 and S > 1:
            with ThreadPoolExecutor(threads) as ex2:
                tables = list(ex2.map(reduce_shard, range(S)))
        else:
            tables = [reduce_shard(s) for s in range(S)]
    return tables


def _describe(rec) -> str:
    uid = getattr(rec, "id", None)
    return f"id={uid!r}" if uid is not None else type(rec).__name__


# --- back-off acoustic model --------------------------------------------------------

def pack_frames(frames: np.ndarray) -> bytes:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    return struct.pack("<I", frames.shape[0]) + frames.tobytes()


def unpack_frames(data: bytes, dim: int) -> np.ndarray:
    (n,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + 4 * n * dim:
        raise DataError(f"frame block of {len(data)} bytes does not hold {n} x {dim} floats")
    return np.frombuffer(data, dtype="<f4", offset=4).reshape(n, dim)


def am_mapper(utt: Utterance, baseline: BaselineAM, lexicon, M: int, word_boundary: bool = True) -> list[tuple[bytes, bytes]]:
    """Align one utterance and emit (maximal key, frames) plus (back-off key, empty) pairs."""
    try:
        symbols, ali = align_transcript(utt, utt.transcript, lexicon, baseline, word_boundary)
    except AlignmentError as e:
        raise SkipRecord(str(e)) from e
    out = []
    for key, (start, end) in extract_maximal(ali, symbols, M):
        out.append((encode_key(key, M).encode("ascii"), pack_frames(utt.frames[start:end])))
        for b in backoff_chain(key):
            out.append((encode_key(b, M).encode("ascii"), b""))
    return out


def shard_by_central_triphone(key: bytes, S: int) -> int:
    return shard_of_encoded(key, S)


@dataclass
class ReducerConfig:
    M: int
    D: int
    n_min: int = 4000
    n_max: int = 256_000
    varmix: VarmixParams = field(default_factory=lambda: VarmixParams(0.3, 2.2))
    em_iterations: int = DEFAULT_EM_ITERATIONS
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")


class _StackEntry:
    __slots__ = ("key", "reservoir")

    def __init__(self, key, reservoir):
        self.key = key
        self.reservoir = reservoir


def am_reducer(
    shard: int,
    inputs: Iterable[ReduceInput],
    cfg: ReducerConfig,
    counters: Counter | None = None,
    estimate: bool = True,
) -> Iterator[tuple[bytes, DiagGmm | None]]:
    """Estimate GMMs for one shard's sorted key stream.

    Keys carrying frames are maximal M-phones: estimated on the spot and
    their frames pushed into reservoirs for every back-off key in their
    chain, which sit on a stack (shortest context at the bottom). A key
    without frames must be the stack top; it is popped and estimated from
    its reservoir. Keys under ``n_min`` frames are dropped silently.

    ``estimate=False`` runs the stack discipline only and yields ``None``
    in place of each GMM.
    """
    counters = counters if counters is not None else Counter()
    rng = np.random.default_rng([cfg.seed, shard])
    stack: list[_StackEntry] = []
    max_depth = max(2 * cfg.M, 1)

    def fit(frames: np.ndarray) -> DiagGmm | None:
        if not estimate:
            return None
        return estimate_gmm(
            frames, varmix_size(frames.shape[0], cfg.varmix), cfg.em_iterations, cfg.variance_floor
        )

    for item in inputs:
        key = item.key.decode("ascii")
        blocks = [unpack_frames(v, cfg.D) for v in item.values if v]
        frames = np.concatenate(blocks) if blocks else np.empty((0, cfg.D), dtype=np.float32)

        if stack and stack[-1].key == key:
            entry = stack.pop()
            if frames.shape[0]:
                entry.reservoir.extend(frames, rng)
                for below in stack:
                    below.reservoir.extend(frames, rng)
            res = entry.reservoir
            if res.seen > cfg.n_max:
                counters["reservoir_sampled"] += 1
            if res.seen >= cfg.n_min:
                counters["backoff_kept"] += 1
                yield item.key, fit(res.samples)
            else:
                counters["backoff_discarded"] += 1
            continue

        if not frames.shape[0]:
            top = stack[-1].key if stack else None
            raise ReducerInvariantError(
                f"shard {shard}: back-off key {key!r} arrived but stack top is {top!r}"
            )
        chain = [encode_key(b, cfg.M) for b in reversed(backoff_chain(decode_key(key, cfg.M)))]
        if len(stack) > len(chain) or any(e.key != c for e, c in zip(stack, chain)):
            raise ReducerInvariantError(
                f"shard {shard}: maximal key {key!r} arrived with unrelated entries "
                f"{[e.key for e in stack]} still pending"
            )
        for c in chain[len(stack):]:
            stack.append(_StackEntry(c, Reservoir(cfg.n_max, cfg.D)))
        if len(stack) > max_depth:
            raise ReducerInvariantError(f"shard {shard}: stack depth {len(stack)} exceeds {max_depth}")
        counters["max_stack_depth"] = max(counters["max_stack_depth"], len(stack))

        counters["maximal_seen"] += 1
        if frames.shape[0] > cfg.n_max:
            own = Reservoir(cfg.n_max, cfg.D)
            own.extend(frames, rng)
            used = own.samples
            counters["reservoir_sampled"] += 1
        else:
            used = frames
        for e in stack:
            e.reservoir.extend(frames, rng)
        if frames.shape[0] >= cfg.n_min:
            counters["maximal_kept"] += 1
            yield item.key, fit(used)
        else:
            counters["maximal_discarded"] += 1

    if stack:
        raise ReducerInvariantError(f"shard {shard}: stream ended with pending back-offs {[e.key for e in stack]}")


def train_bam(
    corpus: Iterable[Utterance],
    baseline: BaselineAM,
    lexicon,
    cfg: ReducerConfig,
    S: int = 1,
    word_boundary: bool = True,
    threads: int = 1,
    spill_bytes: int = DEFAULT_SPILL_BYTES,
    counters: Counter | None = None,
) -> list[list[tuple[str, DiagGmm]]]:
    """Full training pipeline; returns S sorted (encoded key, GMM) tables."""
    counters = counters if counters is not None else Counter()
    shard_counters = [Counter() for _ in range(S)]

    def mapper(utt):
        return am_mapper(utt, baseline, lexicon, cfg.M, word_boundary)

    def reducer(shard, inputs):
        return am_reducer(shard, inputs, cfg, shard_counters[shard])

    tables = run_pipeline(corpus, mapper, shard_by_central_triphone, reducer, S, threads, spill_bytes, counters)
    for c in shard_counters:
        depth = max(counters["max_stack_depth"], c.pop("max_stack_depth", 0))
        counters.update(c)
        counters["max_stack_depth"] = depth
    return [[(k.decode("ascii"), g) for k, g in table] for table in tables]


def format_counters(counters: Counter) -> str:
    names = [
        ("records", "records processed"),
        ("records_skipped", "alignment failures (skipped)"),
        ("pairs_emitted", "map output pairs"),
        ("maximal_seen", "maximal M-phones seen"),
        ("maximal_kept", "maximal M-phones kept"),
        ("maximal_discarded", "maximal M-phones discarded"),
        ("backoff_kept", "back-off M-phones kept"),
        ("backoff_discarded", "back-off M-phones discarded"),
        ("reservoir_sampled", "M-phones reservoir-sampled"),
        ("max_stack_depth", "max reducer stack depth"),
    ]
    width = max(len(label) for _, label in names)
    return "\n".join(f"{label:<{width}}  {counters.get(name, 0)}" for name, label in names)
