"""Acoustic-model data types, frame scoring and the binary corpus format."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_DIM = 39
DEFAULT_VARIANCE_FLOOR = 1e-5

CORPUS_MAGIC = b"BAMC"
CORPUS_VERSION = 1


class DataError(ValueError):
    """Malformed input data (files, records, dimensions)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, order=True)
class CIState:
    phone: str
    state: int

    def __post_init__(self):
        if self.state not in (1, 2, 3):
            raise ValueError(f"state index must be 1, 2 or 3, got {self.state}")
        if not self.phone:
            raise ValueError("empty phone symbol")

    def __str__(self):
        return f"{self.phone}_{self.state}"

    @classmethod
    def parse(cls, text: str) -> "CIState":
        phone, sep, idx = text.rpartition("_")
        if not sep or not idx.isdigit():
            raise DataError(f"malformed CI state {text!r}")
        return cls(phone, int(idx))


@dataclass(frozen=True, eq=False)
class Segment:
    state: CIState
    start_frame: int
    end_frame: int
    first_pass_loglik: np.ndarray

    def __post_init__(self):
        if not self.start_frame < self.end_frame:
            raise ValueError(f"empty segment [{self.start_frame}, {self.end_frame})")
        ll = np.asarray(self.first_pass_loglik, dtype=np.float64)
        if ll.shape != (self.end_frame - self.start_frame,):
            raise ValueError("first_pass_loglik length must equal the segment length")
        object.__setattr__(self, "first_pass_loglik", _frozen(ll))

    @property
    def num_frames(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True, eq=False)
class Alignment:
    utterance_id: str
    segments: tuple[Segment, ...]

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        expected = 0
        for seg in segs:
            if seg.start_frame != expected:
                raise ValueError(
                    f"{self.utterance_id}: segment starts at {seg.start_frame}, expected {expected}"
                )
            expected = seg.end_frame

    @property
    def num_frames(self) -> int:
        return self.segments[-1].end_frame if self.segments else 0

    @property
    def states(self) -> list[CIState]:
        return [s.state for s in self.segments]

    def first_pass_total(self) -> float:
        return float(sum(s.first_pass_loglik.sum() for s in self.segments))


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != var.shape:
            raise ValueError("mean and var must be 1-D vectors of equal length")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("variances must be positive and finite")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "var", _frozen(var))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


class DiagGmm:
    """Weighted mixture of diagonal-covariance Gaussians.

    Parameters are held as read-only arrays: ``weights`` (Q,), ``means``
    and ``vars`` (Q, D).
    """

    __slots__ = ("weights", "means", "vars", "_log_norm", "_log_weights")

    def __init__(self, weights, means, vars):
        w = np.array(weights, dtype=np.float64).reshape(-1)
        mu = np.array(means, dtype=np.float64)
        var = np.array(vars, dtype=np.float64)
        if w.size == 0:
            raise ValueError("a mixture needs at least one component")
        if mu.ndim == 1:
            mu = mu[None, :]
            var = var[None, :]
        if mu.shape != var.shape or mu.shape[0] != w.size:
            raise ValueError(f"shape mismatch: weights {w.shape}, means {mu.shape}, vars {var.shape}")
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-6:
            raise ValueError(f"mixture weights sum to {w.sum()}, not 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        self.weights = _frozen(w)
        self.means = _frozen(mu)
        self.vars = _frozen(var)
        self._log_weights = np.log(w)
        self._log_norm = -0.5 * (mu.shape[1] * LOG_2PI + np.log(var).sum(axis=1))

    @classmethod
    def from_components(cls, weights: Sequence[float], components: Sequence[DiagGaussian]) -> "DiagGmm":
        if not components:
            raise ValueError("a mixture needs at least one component")
        return cls(weights, [c.mean for c in components], [c.var for c in components])

    @property
    def num_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[DiagGaussian]:
        return [DiagGaussian(m, v) for m, v in zip(self.means, self.vars)]

    def component_logliks(self, frames: np.ndarray) -> np.ndarray:
        """Per-frame, per-component log densities, shape (N, Q)."""
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise DataError(f"frame dimension {x.shape[1]} != model dimension {self.dim}")
        diff = x[:, None, :] - self.means[None, :, :]
        return self._log_norm[None, :] - 0.5 * np.einsum("nqd,qd->nq", diff * diff, 1.0 / self.vars)

    def loglik(self, frames: np.ndarray) -> np.ndarray:
        """Log-likelihood of each row of ``frames`` (N, D) -> (N,)."""
        lp = self.component_logliks(frames) + self._log_weights[None, :]
        top = lp.max(axis=1)
        return top + np.log(np.exp(lp - top[:, None]).sum(axis=1))

    def floored(self, floor: float) -> "DiagGmm":
        return DiagGmm(self.weights, self.means, np.maximum(self.vars, floor))

    def allclose(self, other: "DiagGmm", atol: float) -> bool:
        return (
            self.weights.shape == other.weights.shape
            and self.means.shape == other.means.shape
            and np.allclose(self.weights, other.weights, rtol=0, atol=atol)
            and np.allclose(self.means, other.means, rtol=0, atol=atol)
            and np.allclose(self.vars, other.vars, rtol=0, atol=atol)
        )

    def __repr__(self):
        return f"DiagGmm(Q={self.num_components}, D={self.dim})"

    # Wire format: u32 Q, u32 D, then Q x (f32 weight, D f32 mean, D f32 var).
    def to_bytes(self) -> bytes:
        q, d = self.means.shape
        body = np.concatenate([self.weights[:, None], self.means, self.vars], axis=1)
        return struct.pack("<II", q, d) + body.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes | memoryview) -> "DiagGmm":
        if len(data) < 8:
            raise DataError("truncated GMM record")
        q, d = struct.unpack_from("<II", data, 0)
        need = 8 + 4 * q * (1 + 2 * d)
        if len(data) != need:
            raise DataError(f"GMM record has {len(data)} bytes, expected {need}")
        body = np.frombuffer(data, dtype="<f4", offset=8).reshape(q, 1 + 2 * d).astype(np.float64)
        w = body[:, 0]
        # f32 rounding can push the sum off 1 by a few ulps
        return cls(w / w.sum(), body[:, 1 : 1 + d], body[:, 1 + d :])


def gaussian_loglik(g: DiagGaussian, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != g.mean.shape:
        raise DataError(f"frame dimension {y.shape} != Gaussian dimension {g.mean.shape}")
    return float(np.sum(-0.5 * np.log(2.0 * np.pi * g.var) - (y - g.mean) ** 2 / (2.0 * g.var)))


def gmm_loglik(gmm: DiagGmm, y) -> float:
    """Log-sum-exp over components of log weight plus component log density."""
    return float(gmm.loglik(np.asarray(y, dtype=np.float64)[None, :])[0])


def score_frame(gmm_loglik_value: float, M: int, o: int, f_bo: float) -> float:
    """Frame score with the back-off penalty ``f_bo * (M - o)`` subtracted."""
    if not 0 <= o <= M:
        raise ValueError(f"order {o} outside [0, {M}]")
    if f_bo < 0:
        raise ValueError("back-off cost must be non-negative")
    return gmm_loglik_value - f_bo * (M - o)


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    transcript: tuple[str, ...]
    frames: np.ndarray = field(repr=False)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise DataError(f"utterance {self.id!r} has no frames")
        if not np.all(np.isfinite(frames)):
            raise DataError(f"utterance {self.id!r} has non-finite features")
        object.__setattr__(self, "transcript", tuple(self.transcript))
        object.__setattr__(self, "frames", _frozen(frames))

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


# --- corpus file --------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_utterance(utt: Utterance) -> bytes:
    parts = [_pack_str(utt.id), struct.pack("<I", len(utt.transcript))]
    parts.extend(_pack_str(w) for w in utt.transcript)
    parts.append(struct.pack("<Q", utt.frames.shape[0]))
    parts.append(utt.frames.astype("<f4").tobytes())
    return b"".join(parts)


def write_corpus(path, utterances: Iterable[Utterance], dim: int) -> list[int]:
    """Write a corpus file; returns the byte offset of every utterance record."""
    utts = list(utterances)
    offsets = []
    buf = io.BytesIO()
    buf.write(CORPUS_MAGIC + struct.pack("<IIQ", CORPUS_VERSION, dim, len(utts)))
    for u in utts:
        if u.dim != dim:
            raise DataError(f"utterance {u.id!r} has dimension {u.dim}, corpus is {dim}")
        offsets.append(buf.tell())
        buf.write(encode_utterance(u))
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    return offsets


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise DataError(f"truncated corpus while reading {what}")
    return b


def _read_str(f: BinaryIO, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4, what))
    return _read_exact(f, n, what).decode("utf-8")


def read_utterance(f: BinaryIO, dim: int) -> Utterance:
    uid = _read_str(f, "utterance id")
    (nw,) = struct.unpack("<I", _read_exact(f, 4, f"{uid}: word count"))
    words = [_read_str(f, f"{uid}: word") for _ in range(nw)]
    (nf,) = struct.unpack("<Q", _read_exact(f, 8, f"{uid}: frame count"))
    raw = _read_exact(f, 4 * nf * dim, f"{uid}: frames")
    frames = np.frombuffer(raw, dtype="<f4").reshape(nf, dim)
    return Utterance(uid, words, frames)


def read_corpus_header(f: BinaryIO) -> tuple[int, int]:
    head = _read_exact(f, 20, "header")
    if head[:4] != CORPUS_MAGIC:
        raise DataError("not a corpus file (bad magic)")
    version, dim, count = struct.unpack("<IIQ", head[4:])
    if version != CORPUS_VERSION:
        raise DataError(f"unsupported corpus version {version}")
    return dim, count


def iter_corpus(path) -> Iterator[Utterance]:
    with open(path, "rb") as f:
        dim, count = read_corpus_header(f)
        for _ in range(count):
            yield read_utterance(f, dim)
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after {count} utterances")


def read_corpus(path) -> tuple[int, list[Utterance]]:
    with open(path, "rb") as f:
        dim, _ = read_corpus_header(f)
    return dim, list(iter_corpus(path))


def read_utterance_at(path, offset: int) -> Utterance:
    with open(path, "rb") as f:
        dim, _ = read_corpus_header(f)
        f.seek(offset)
        return read_utterance(f, dim)


def corpus_offsets(path) -> dict[str, int]:
    """Map utterance id -> record byte offset."""
    out = {}
    with open(path, "rb") as f:
        dim, count = read_corpus_header(f)
        for _ in range(count):
            pos = f.tell()
            uid = _read_str(f, "utterance id")
            (nw,) = struct.unpack("<I", _read_exact(f, 4, "word count"))
            for _ in range(nw):
                _read_str(f, "word")
            (nf,) = struct.unpack("<Q", _read_exact(f, 8, "frame count"))
            f.seek(4 * nf * dim, io.SEEK_CUR)
            out[uid] = pos
    return out
