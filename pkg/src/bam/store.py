"""Immutable sorted shard files for the back-off model, and the batch-lookup facade.

Shard file layout (little-endian)::

    "BAMS" u32 version u32 M u32 D u32 S u32 shard_index u64 entry_count
    entry_count x (u32 key_len, key bytes, u32 value_len, value bytes)
    entry_count x u64 entry offset
    u64 footer offset
    u32 CRC32C of every preceding byte

Values are serialized ``DiagGmm`` records.
"""

from __future__ import annotations

import bisect
import mmap
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import crc32c

from .core import DataError, DiagGmm
from .mphone import shard_of_encoded

MAGIC = b"BAMS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class CorruptShardError(DataError):
    pass


def shard_filename(index: int, S: int) -> str:
    return f"shard-{index:05d}-of-{S:05d}.bams"


def write_shard(path, entries: Iterable[tuple[str, DiagGmm | bytes]], shard_index: int, M: int, D: int, S: int) -> int:
    """Write one shard; returns the number of entries.

    Keys must arrive strictly increasing and belong to ``shard_index``.
    """
    if not 0 <= shard_index < S:
        raise ValueError(f"shard index {shard_index} outside [0, {S})")
    offsets = []
    prev = None
    with open(path, "w+b") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, M, D, S, shard_index, 0))
        for key, value in entries:
            kb = key.encode("ascii") if isinstance(key, str) else bytes(key)
            if prev is not None and kb <= prev:
                raise DataError(f"shard keys out of order: {kb!r} after {prev!r}")
            if shard_of_encoded(kb, S) != shard_index:
                raise DataError(f"key {kb!r} does not belong to shard {shard_index} of {S}")
            vb = value.to_bytes() if isinstance(value, DiagGmm) else bytes(value)
            offsets.append(f.tell())
            f.write(_U32.pack(len(kb)) + kb + _U32.pack(len(vb)) + vb)
            prev = kb
        footer = f.tell()
        f.write(struct.pack(f"<{len(offsets)}Q", *offsets))
        f.write(_U64.pack(footer))
        f.seek(0)
        f.write(_HEADER.pack(MAGIC, VERSION, M, D, S, shard_index, len(offsets)))
        f.seek(0)
        crc = 0
        for chunk in iter(lambda: f.read(1 << 20), b""):
            crc = crc32c.crc32c(chunk, crc)
        f.write(_U32.pack(crc))
    return len(offsets)


class ModelShard(Mapping[str, DiagGmm]):
    """Read-only view of one shard file; keys are held in memory, values read on demand."""

    def __init__(self, path, verify: bool = True):
        self.path = Path(path)
        with open(path, "rb") as f:
            try:
                self._mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
            except ValueError:  # empty file
                raise CorruptShardError(f"{path}: empty file") from None
        mm = self._mm
        if len(mm) < _HEADER.size + 12:
            raise CorruptShardError(f"{path}: too short for a shard file")
        magic, version, self.M, self.D, self.S, self.index, count = _HEADER.unpack_from(mm, 0)
        if magic != MAGIC:
            raise CorruptShardError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CorruptShardError(f"{path}: unsupported version {version}")
        if verify:
            (stored,) = _U32.unpack_from(mm, len(mm) - 4)
            if crc32c.crc32c(mm[: len(mm) - 4]) != stored:
                raise CorruptShardError(f"{path}: checksum mismatch")
        (footer,) = _U64.unpack_from(mm, len(mm) - 12)
        if footer + 8 * count != len(mm) - 12:
            raise CorruptShardError(f"{path}: footer does not match entry count {count}")
        self._offsets = struct.unpack_from(f"<{count}Q", mm, footer)
        self._keys = []
        self._values = []
        for off in self._offsets:
            (klen,) = _U32.unpack_from(mm, off)
            key = mm[off + 4 : off + 4 + klen].decode("ascii")
            (vlen,) = _U32.unpack_from(mm, off + 4 + klen)
            vstart = off + 8 + klen
            self._keys.append(key)
            self._values.append((vstart, vlen))

    def close(self):
        self._mm.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self):
        return len(self._keys)

    def __iter__(self) -> Iterator[str]:
        return iter(self._keys)

    def _find(self, key: str) -> int:
        i = bisect.bisect_left(self._keys, key)
        if i < len(self._keys) and self._keys[i] == key:
            return i
        return -1

    def __contains__(self, key):
        return self._find(key) >= 0

    def raw(self, i: int) -> bytes:
        start, n = self._values[i]
        return self._mm[start : start + n]

    def __getitem__(self, key: str) -> DiagGmm:
        i = self._find(key)
        if i < 0:
            raise KeyError(key)
        return DiagGmm.from_bytes(self.raw(i))

    def items(self) -> Iterator[tuple[str, DiagGmm]]:
        for i, key in enumerate(self._keys):
            yield key, DiagGmm.from_bytes(self.raw(i))


class ModelStore:
    """All S shards of a model behind one batch-lookup interface."""

    def __init__(self, shards: list[ModelShard], threads: int = 1):
        if not shards:
            raise DataError("a model needs at least one shard")
        head = shards[0]
        self.M, self.D, self.S = head.M, head.D, head.S
        if len(shards) != self.S:
            raise DataError(f"model declares {self.S} shards, {len(shards)} found")
        for i, sh in enumerate(shards):
            if (sh.M, sh.D, sh.S, sh.index) != (self.M, self.D, self.S, i):
                raise CorruptShardError(f"{sh.path}: header inconsistent with shard {i} of the model")
        self.shards = shards
        self.threads = max(1, threads)

    @classmethod
    def open(cls, directory, threads: int = 1, verify: bool = True) -> "ModelStore":
        paths = sorted(Path(directory).glob("shard-*-of-*.bams"))
        if not paths:
            raise DataError(f"{directory}: no shard files")
        return cls([ModelShard(p, verify) for p in paths], threads)

    def close(self):
        for sh in self.shards:
            sh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self):
        return sum(len(s) for s in self.shards)

    def items(self) -> Iterator[tuple[str, DiagGmm]]:
        for sh in self.shards:
            yield from sh.items()

    def batch_lookup(self, keys: Iterable[str]) -> dict[str, DiagGmm]:
        """Return the stored subset of ``keys`` with their GMMs, in key order."""
        routed: dict[int, list[str]] = {}
        for k in set(keys):
            routed.setdefault(shard_of_encoded(k, self.S), []).append(k)

        def probe(item):
            idx, ks = item
            shard = self.shards[idx]
            found = []
            for k in ks:
                i = shard._find(k)
                if i >= 0:
                    found.append((k, DiagGmm.from_bytes(shard.raw(i))))
            return found

        work = sorted(routed.items())
        if self.threads > 1 and len(work) > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                parts = list(ex.map(probe, work))
        else:
            parts = [probe(w) for w in work]
        return dict(sorted(kv for part in parts for kv in part))


class DictModel:
    """In-memory stand-in exposing the same ``batch_lookup`` contract."""

    def __init__(self, entries: Mapping[str, DiagGmm], M: int):
        self.entries = dict(entries)
        self.M = M

    def __len__(self):
        return len(self.entries)

    def items(self):
        return iter(sorted(self.entries.items()))

    def batch_lookup(self, keys: Iterable[str]) -> dict[str, DiagGmm]:
        return {k: self.entries[k] for k in sorted(set(keys)) if k in self.entries}


def write_model(directory, tables: list[list[tuple[str, DiagGmm]]], M: int, D: int) -> list[Path]:
    """Write the S reducer output tables as S shard files."""
    os.makedirs(directory, exist_ok=True)
    S = len(tables)
    paths = []
    for i, table in enumerate(tables):
        p = Path(directory) / shard_filename(i, S)
        write_shard(p, table, i, M, D, S)
        paths.append(p)
    return paths
