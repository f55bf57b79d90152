"""M-phone keys: extraction from alignments, back-off, encoding and sharding.

Context symbols are plain strings: a phone symbol, or ``WORD_BOUNDARY``.
``PAD`` only ever appears in encoded keys, marking absent positions.
Phone bytes must sort below ``WORD_BOUNDARY`` which sorts below ``PAD``;
that ordering is what makes every back-off key sort after the keys it
was derived from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import Alignment, CIState, DataError

SIL = "sil"
WORD_BOUNDARY = "|"
PAD = "~"
STATES_PER_PHONE = 3

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def check_phone_symbol(phone: str) -> None:
    """Phones are printable ASCII, no whitespace, every byte below '|'."""
    if not phone:
        raise DataError("empty phone symbol")
    for ch in phone:
        if not 0x21 <= ord(ch) < 0x7C:
            raise DataError(f"phone {phone!r}: byte {ch!r} not allowed (must be in '!'..'{{')")


@dataclass(frozen=True)
class MPhoneKey:
    central: CIState
    left: tuple[str, ...] = ()
    right: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "left", tuple(self.left))
        object.__setattr__(self, "right", tuple(self.right))
        if PAD in self.left or PAD in self.right:
            raise ValueError("absent-context padding cannot appear in a key")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.left), len(self.right)

    def __str__(self):
        # the human-readable form: far-left first, placeholder, then right
        return f"{self.central} / {' '.join([*reversed(self.left), '___', *self.right])}"


def order(key: MPhoneKey) -> int:
    return max(len(key.left), len(key.right))


def truncate(key: MPhoneKey, n: int) -> MPhoneKey:
    return MPhoneKey(key.central, key.left[:n], key.right[:n])


def phone_sequence(
    transcript: Sequence[str], lexicon: Mapping[str, Sequence[str]], word_boundary: bool = False
) -> list[str]:
    """Context-symbol sequence for a transcript, sentence ends pronounced ``sil``."""
    seq = [SIL]
    if word_boundary:
        seq.append(WORD_BOUNDARY)
    for i, word in enumerate(transcript):
        try:
            pron = lexicon[word]
        except KeyError:
            raise DataError(f"out-of-vocabulary word {word!r}") from None
        if word_boundary and i > 0:
            seq.append(WORD_BOUNDARY)
        seq.extend(pron)
    if word_boundary and transcript:
        seq.append(WORD_BOUNDARY)
    seq.append(SIL)
    return seq


def state_chain(symbols: Sequence[str]) -> list[CIState]:
    """HMM state sequence (three states per phone) for a context-symbol sequence."""
    return [
        CIState(sym, s)
        for sym in symbols
        if sym != WORD_BOUNDARY
        for s in range(1, STATES_PER_PHONE + 1)
    ]


def extract_maximal(alignment: Alignment, symbols: Sequence[str], M: int) -> list[tuple[MPhoneKey, tuple[int, int]]]:
    """One maximal-order key per alignment segment, paired with its frame range."""
    if M < 0:
        raise ValueError("model order must be non-negative")
    positions = [i for i, sym in enumerate(symbols) if sym != WORD_BOUNDARY]
    segs = alignment.segments
    if len(segs) != STATES_PER_PHONE * len(positions):
        raise DataError(
            f"{alignment.utterance_id}: {len(segs)} segments for {len(positions)} phones"
        )
    out = []
    for k, seg in enumerate(segs):
        pos = positions[k // STATES_PER_PHONE]
        expected = CIState(symbols[pos], k % STATES_PER_PHONE + 1)
        if seg.state != expected:
            raise DataError(
                f"{alignment.utterance_id}: segment {k} is {seg.state}, expected {expected}"
            )
        left = tuple(reversed(symbols[max(pos - M, 0) : pos]))
        right = tuple(symbols[pos + 1 : pos + 1 + M])
        out.append((MPhoneKey(seg.state, left, right), (seg.start_frame, seg.end_frame)))
    return out


def backoff_step(key: MPhoneKey) -> MPhoneKey | None:
    """Next shorter key, or None once the central triphone (or an edge stump) is reached."""
    nl, nr = key.shape
    if nl == nr:
        if nl <= 1:
            return None
        return MPhoneKey(key.central, key.left[:-1], key.right[:-1])
    # shorten the longer side; a side already at zero stays there
    if nl > nr:
        if nr == 0 and nl <= 1:
            return None
        return MPhoneKey(key.central, key.left[:-1], key.right)
    if nl == 0 and nr <= 1:
        return None
    return MPhoneKey(key.central, key.left, key.right[:-1])


def backoff_chain(key: MPhoneKey) -> list[MPhoneKey]:
    chain = []
    nxt = backoff_step(key)
    while nxt is not None:
        chain.append(nxt)
        nxt = backoff_step(nxt)
    return chain


def encode_key(key: MPhoneKey, M: int) -> str:
    """Interleave contexts nearest-first (L1 R1 L2 R2 ...), padded to 2M tokens."""
    if len(key.left) > M or len(key.right) > M:
        raise ValueError(f"context {key.shape} longer than model order {M}")
    toks = []
    for i in range(M):
        toks.append(key.left[i] if i < len(key.left) else PAD)
        toks.append(key.right[i] if i < len(key.right) else PAD)
    return " ".join([str(key.central), "/", *toks])


def decode_key(encoded: str | bytes, M: int) -> MPhoneKey:
    if isinstance(encoded, (bytes, bytearray, memoryview)):
        encoded = bytes(encoded).decode("ascii")
    toks = encoded.split(" ")
    if len(toks) != 2 + 2 * M or toks[1] != "/" or any(not t for t in toks):
        raise DataError(f"malformed encoded key {encoded!r} for order {M}")
    central = CIState.parse(toks[0])
    sides: list[list[str]] = [[], []]
    closed = [False, False]
    for i, tok in enumerate(toks[2:]):
        side = i % 2
        if tok == PAD:
            closed[side] = True
        elif closed[side]:
            raise DataError(f"context symbol after padding in {encoded!r}")
        else:
            sides[side].append(tok)
    return MPhoneKey(central, tuple(sides[0]), tuple(sides[1]))


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def shard_of(key: MPhoneKey, S: int, M: int) -> int:
    """Shard index from the central triphone, so a key and all its back-offs colocate."""
    if S < 1:
        raise ValueError("shard count must be at least 1")
    return fnv1a_64(encode_key(truncate(key, 1), M).encode("ascii")) % S


def shard_of_encoded(encoded: str | bytes, S: int) -> int:
    """``shard_of`` computed directly on an encoded key (its order is implied by the token count)."""
    if S < 1:
        raise ValueError("shard count must be at least 1")
    if isinstance(encoded, str):
        encoded = encoded.encode("ascii")
    toks = encoded.split(b" ")
    if len(toks) < 2 or len(toks) % 2:
        raise DataError(f"malformed encoded key {encoded!r}")
    tail = [PAD.encode()] * (len(toks) - 4)
    return fnv1a_64(b" ".join(toks[:4] + tail)) % S
