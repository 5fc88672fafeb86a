"""Convergent counting bloom filter and count-min sketch.

Both track approximate per-key counts with one-sided error: ``value(x)``
is the minimum over the counters ``x`` hashes to, and is always >= the
exact count. A ``count`` operation carries the operand itself (never the
hashed indices): every replica re-hashes with identical seeded hash
functions, so the touched cells match everywhere. Hash functions are
derived by double hashing, h_i(x) = h1(x) + i*h2(x) mod m, with h1/h2
taken from a keyed blake2b of the operand.

Counting is additive and not idempotent, so both kinds set
``requires_ordered_delivery``: the replication layer applies each count
record exactly once per replica, in sequence order.

A coalesced run of counts becomes one operation holding (key, amount)
pairs with per-key amounts summed.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Optional, Sequence

from ..types import (OP_COUNT, OPERAND_COUNT_MAX, Operation, ProtocolError,
                     SnapshotError, U64_MAX, saturate_u64)
from .base import StateObject

_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")

COUNTER_WIDTH_BYTES = 4  # nominal width used when sizing from a byte budget


def _double_hash(data: bytes, seed: int) -> tuple[int, int]:
    digest = hashlib.blake2b(data, digest_size=16,
                             key=seed.to_bytes(8, "big")).digest()
    return int.from_bytes(digest[:8], "big"), int.from_bytes(digest[8:], "big")


def _pack_counts(pairs: Sequence[tuple[bytes, int]]) -> Operation:
    operands = []
    for key, amount in pairs:
        operands.append(key)
        operands.append(_U32.pack(min(amount, 2**32 - 1)))
    return Operation(OP_COUNT, tuple(operands))


def _unpack_counts(op: Operation) -> list[tuple[bytes, int]]:
    if op.opcode != OP_COUNT or len(op.operands) % 2:
        raise ProtocolError("malformed count operation")
    return [(op.operands[i], _U32.unpack(op.operands[i + 1])[0])
            for i in range(0, len(op.operands), 2)]


class _CountingSketch(StateObject):
    """Shared machinery: a bank of counter rows plus seeded double hashing."""

    requires_ordered_delivery = True

    def __init__(self, object_id, rows: int, row_len: int, hashes: int, seed: int):
        super().__init__(object_id)
        if rows < 1 or row_len < 1 or hashes < 1:
            raise ValueError("sketch dimensions must be >= 1")
        self.rows = rows
        self.row_len = row_len
        self.hashes = hashes
        self.seed = seed
        self._counters = [[0] * row_len for _ in range(rows)]

    def _cells(self, key: bytes) -> list[tuple[int, int]]:
        """(row, index) pairs touched by ``key``; defined per kind."""
        raise NotImplementedError

    def count(self, key: bytes, amount: int = 1) -> None:
        """Locally count ``amount`` occurrences of ``key`` and record it."""
        self.record(self.build_count(key, amount))

    @staticmethod
    def build_count(key: bytes, amount: int = 1) -> Operation:
        return _pack_counts([(key, amount)])

    def apply(self, op: Operation) -> None:
        for key, amount in _unpack_counts(op):
            for row, idx in self._cells(key):
                cell = self._counters[row][idx] + amount
                if cell > U64_MAX:
                    self.diag("sketch_saturated")
                self._counters[row][idx] = saturate_u64(cell)

    def value(self, key: bytes) -> int:
        return min(self._counters[row][idx] for row, idx in self._cells(key))

    def coalesce(self, ops: Sequence[Operation]) -> Optional[tuple[Operation, int]]:
        totals: dict[bytes, int] = {}
        consumed = 0
        for op in ops:
            grown = dict(totals)
            for key, amount in _unpack_counts(op):
                grown[key] = grown.get(key, 0) + amount
            if (2 * len(grown) > OPERAND_COUNT_MAX
                    or any(v > 2**32 - 1 for v in grown.values())):
                break
            totals = grown
            consumed += 1
        if consumed < 1 or len(totals) == consumed:
            return ops[0], 1  # nothing merges (or nothing fits)
        return _pack_counts(sorted(totals.items())), consumed

    def counter_rows(self) -> list[list[int]]:
        return [row[:] for row in self._counters]

    def snapshot(self) -> bytes:
        parts = [struct.pack(">IIIQ", self.rows, self.row_len, self.hashes, self.seed)]
        for row in self._counters:
            parts += [_U64.pack(v) for v in row]
        return b"".join(parts)

    def restore(self, data: bytes) -> None:
        if len(data) < 20:
            raise SnapshotError("truncated sketch snapshot")
        dims = struct.unpack_from(">IIIQ", data, 0)
        if dims != (self.rows, self.row_len, self.hashes, self.seed):
            raise SnapshotError("sketch snapshot does not match configuration")
        if len(data) != 20 + 8 * self.rows * self.row_len:
            raise SnapshotError("truncated sketch snapshot")
        offset = 20
        for row in self._counters:
            for i in range(self.row_len):
                row[i] = _U64.unpack_from(data, offset)[0]
                offset += 8

    def query_digest(self) -> bytes:
        return b"".join(_U64.pack(v) for row in self._counters for v in row)

    def config_digest(self) -> bytes:
        return f"{self.kind}:{self.rows}:{self.row_len}:{self.hashes}:{self.seed}".encode()


class CountingBloomFilter(_CountingSketch):
    """One vector of ``m`` counters updated at ``k`` hashed indices."""

    kind = "cbf"

    def __init__(self, object_id, m: int, k: int, seed: int = 0):
        super().__init__(object_id, rows=1, row_len=m, hashes=k, seed=seed)
        self.m = m
        self.k = k

    @classmethod
    def from_byte_budget(cls, object_id, budget: int, k: int = 4, seed: int = 0):
        """Size the counter vector to fit a memory budget in bytes."""
        m = max(1, budget // COUNTER_WIDTH_BYTES)
        return cls(object_id, m=m, k=k, seed=seed)

    def _cells(self, key: bytes) -> list[tuple[int, int]]:
        h1, h2 = _double_hash(key, self.seed)
        return [(0, (h1 + i * h2) % self.m) for i in range(self.k)]


class CountMinSketch(_CountingSketch):
    """``k`` arrays of ``n`` counters, one hash function per array."""

    kind = "cms"

    def __init__(self, object_id, k: int, n: int, seed: int = 0):
        super().__init__(object_id, rows=k, row_len=n, hashes=k, seed=seed)
        self.k = k
        self.n = n

    def _cells(self, key: bytes) -> list[tuple[int, int]]:
        h1, h2 = _double_hash(key, self.seed)
        return [(i, (h1 + i * h2) % self.n) for i in range(self.k)]
