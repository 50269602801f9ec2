"""Counting Bloom filter over 32-byte transaction ids."""

from __future__ import annotations

import math
import struct

import numpy as np

from . import _accel

MAGIC = 0xCB
HEADER_SIZE = 16
_MAX_U24 = (1 << 24) - 1


class UnderflowAttempt(ValueError):
    """A removal addressed a counter that is already zero; the filter is out of sync with its pool."""


class MalformedFilter(ValueError):
    pass


def _as_words(tx_ids) -> np.ndarray:
    if isinstance(tx_ids, (bytes, bytearray, memoryview)):
        tx_ids = bytes(tx_ids)
        if len(tx_ids) % 32:
            raise ValueError("transaction ids must be 32 bytes")
        return np.frombuffer(tx_ids, dtype="<u8").astype(np.uint64).reshape(-1, 4)
    return np.ascontiguousarray(tx_ids, dtype=np.uint64).reshape(-1, 4)


class CountingBloomFilter:
    """``length`` saturating counters of ``c`` bits each, ``k`` hash positions per item.

    Counters are stored one per byte; ``c`` only sets the saturation value
    ``2**c - 1`` and the packed wire size.
    """

    def __init__(self, length: int, k: int = 4, c: int = 4, salt: int = 0):
        if not 1 <= length <= _MAX_U24:
            raise ValueError(f"length must be in [1, {_MAX_U24}], got {length}")
        if not 1 <= k <= 16:
            raise ValueError(f"k must be in [1, 16], got {k}")
        if not 1 <= c <= 8:
            raise ValueError(f"counter width must be in [1, 8] bits, got {c}")
        self.length = int(length)
        self.k = int(k)
        self.c = int(c)
        self.salt = int(salt) & 0xFFFFFFFFFFFFFFFF
        self.cmax = (1 << c) - 1
        self.counters = np.zeros(self.length, dtype=np.uint8)
        self.population = 0

    @classmethod
    def for_capacity(cls, expected_items: int, k: int = 4, c: int = 4, salt: int = 0, bits_per_item: int = 8):
        return cls(max(8, bits_per_item * int(expected_items)), k=k, c=c, salt=salt)

    def indices(self, tx_ids) -> np.ndarray:
        return _accel.cbf_indices(_as_words(tx_ids), self.salt, self.k, self.length)

    def add(self, tx_ids) -> None:
        """Insert one id (bytes) or a batch of ids (``(N, 4)`` uint64 words)."""
        self.add_indices(self.indices(tx_ids))

    def add_indices(self, idx: np.ndarray) -> None:
        """Insert items given their precomputed ``(N, k)`` counter positions."""
        _accel.cbf_add(self.counters, idx, self.cmax)
        self.population += idx.shape[0]

    def remove(self, tx_ids) -> None:
        """Remove previously added ids; saturated counters are left untouched.

        Raises :class:`UnderflowAttempt` without modifying the filter when a
        removal would take a counter below zero.
        """
        self.remove_indices(self.indices(tx_ids))

    def remove_indices(self, idx: np.ndarray) -> None:
        bad = _accel.cbf_underflows(self.counters, idx, self.cmax)
        if bad:
            raise UnderflowAttempt(f"{bad} counters would underflow")
        _accel.cbf_remove(self.counters, idx, self.cmax)
        self.population = max(0, self.population - idx.shape[0])

    def contains(self, tx_id: bytes) -> bool:
        return bool(self.contains_many(tx_id)[0])

    def contains_many(self, tx_ids) -> np.ndarray:
        return _accel.cbf_query(self.counters, self.indices(tx_ids))

    def __contains__(self, tx_id: bytes) -> bool:
        return self.contains(tx_id)

    def rebuild(self, tx_ids) -> None:
        """Reset and re-insert from the authoritative pool contents."""
        self.counters[:] = 0
        self.population = 0
        self.add(tx_ids)

    def rebuild_indices(self, idx: np.ndarray) -> None:
        self.counters[:] = 0
        self.population = 0
        self.add_indices(idx)

    def copy(self) -> "CountingBloomFilter":
        other = CountingBloomFilter(self.length, self.k, self.c, self.salt)
        other.counters = self.counters.copy()
        other.population = self.population
        return other

    @property
    def saturated(self) -> int:
        return int(np.count_nonzero(self.counters == self.cmax))

    def expected_fpr(self, items: int | None = None) -> float:
        items = self.population if items is None else items
        return (1.0 - math.exp(-self.k * items / self.length)) ** self.k

    @property
    def size_bytes(self) -> int:
        return HEADER_SIZE + (self.length * self.c + 7) // 8

    def serialize(self) -> bytes:
        header = bytes([MAGIC, ((self.c - 1) << 4) | (self.k - 1)])
        header += self.length.to_bytes(3, "little")
        header += min(self.population, _MAX_U24).to_bytes(3, "little")
        header += struct.pack("<Q", self.salt)
        bits = np.unpackbits(self.counters[:, None], axis=1, bitorder="little")[:, : self.c]
        return header + np.packbits(bits.ravel(), bitorder="little").tobytes()

    @classmethod
    def deserialize(cls, data: bytes) -> "CountingBloomFilter":
        if len(data) < HEADER_SIZE or data[0] != MAGIC:
            raise MalformedFilter("bad magic or truncated header")
        c = (data[1] >> 4) + 1
        k = (data[1] & 0x0F) + 1
        length = int.from_bytes(data[2:5], "little")
        population = int.from_bytes(data[5:8], "little")
        (salt,) = struct.unpack_from("<Q", data, 8)
        if c > 8 or length == 0:
            raise MalformedFilter(f"unsupported counter width {c} or empty filter")
        body_len = (length * c + 7) // 8
        if len(data) != HEADER_SIZE + body_len:
            raise MalformedFilter(f"expected {HEADER_SIZE + body_len} bytes, got {len(data)}")
        filt = cls(length, k=k, c=c, salt=salt)
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE), bitorder="little")
        bits = bits[: length * c].reshape(length, c)
        weights = (1 << np.arange(c)).astype(np.uint8)
        filt.counters = (bits * weights).sum(axis=1).astype(np.uint8)
        filt.population = population
        return filt

    def __eq__(self, other) -> bool:
        if not isinstance(other, CountingBloomFilter):
            return NotImplemented
        return (
            (self.length, self.k, self.c, self.salt, self.population)
            == (other.length, other.k, other.c, other.salt, other.population)
            and np.array_equal(self.counters, other.counters)
        )

    def __repr__(self) -> str:
        return f"CountingBloomFilter(L={self.length}, k={self.k}, c={self.c}, population={self.population})"


def add(filt: CountingBloomFilter, tx_id) -> None:
    filt.add(tx_id)


def remove(filt: CountingBloomFilter, tx_id) -> None:
    filt.remove(tx_id)


def contains(filt: CountingBloomFilter, tx_id: bytes) -> bool:
    return filt.contains(tx_id)


def serialize(filt: CountingBloomFilter) -> bytes:
    return filt.serialize()


def deserialize(data: bytes) -> CountingBloomFilter:
    return CountingBloomFilter.deserialize(data)
