"""Compact block encoding tailored to each receiver's pool summary.

A compact block keeps the block header and, per transaction in order, either
a 6-byte short id (when the receiver's filter claims it holds the
transaction) or the full transaction. Receivers resolve short ids against
their own pool; anything unresolved costs one extra request/response round.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from . import _accel
from .cbf import CountingBloomFilter
from .chain import Block, BlockHeader, Transaction, TxBatch, block_from_header, parse_header

SHORT_ID_BYTES = 6
SHORT_ID_BITS = 8 * SHORT_ID_BYTES
_SHORT_KEY = 0x2545F4914F6CDD1D
_SALT_KEY = 0x7A3C5F0E9D1B2C44
_EXT = struct.Struct("<QB")  # salt, short-id bit width


class AmbiguousShortId(LookupError):
    """Two pool transactions share the short id of a block entry."""


def block_salt(step: int, signer: int) -> int:
    """Per-block salt derived from the block's (step, signer)."""
    words = np.array([[step & 0xFFFFFFFFFFFFFFFF, signer & 0xFFFFFFFFFFFFFFFF, 0, 0]], dtype=np.uint64)
    return int(_accel.hash_words(words, _SALT_KEY)[0])


def short_ids(tx_ids, salt: int, bits: int = SHORT_ID_BITS) -> np.ndarray:
    """Keyed 64-bit hash of each id truncated to ``bits`` bits, as uint64."""
    if isinstance(tx_ids, (bytes, bytearray)):
        tx_ids = np.frombuffer(bytes(tx_ids), dtype="<u8").astype(np.uint64).reshape(-1, 4)
    h = _accel.hash_words(tx_ids, (int(salt) ^ _SHORT_KEY) & 0xFFFFFFFFFFFFFFFF)
    if bits >= 64:
        return h
    return h & np.uint64((1 << bits) - 1)


def short_id(tx_id: bytes, salt: int, bits: int = SHORT_ID_BITS) -> bytes:
    value = int(short_ids(tx_id, salt, bits)[0])
    return value.to_bytes((bits + 7) // 8, "little")


class ShortId(NamedTuple):
    value: bytes


class FullTx(NamedTuple):
    tx: Transaction


Entry = Union[ShortId, FullTx]


@dataclass(frozen=True, eq=False)
class CompactBlock:
    """Header bytes plus a presence bitmap, short ids and full transactions.

    ``short_mask[i]`` is True when entry ``i`` is a short id. ``short_values``
    and ``full`` hold the short and full entries in block order.
    """

    header_bytes: bytes
    short_mask: np.ndarray
    short_values: np.ndarray
    full: TxBatch
    salt: int
    id_bits: int = SHORT_ID_BITS
    header: BlockHeader = field(init=False, repr=False)

    def __post_init__(self) -> None:
        header, used = parse_header(self.header_bytes)
        if used != len(self.header_bytes):
            raise ValueError("header has trailing bytes")
        if header.tx_count != len(self.short_mask):
            raise ValueError("entry count does not match header")
        if int(self.short_mask.sum()) != len(self.short_values) or len(self.full) + len(self.short_values) != header.tx_count:
            raise ValueError("inconsistent entry split")
        object.__setattr__(self, "header", header)

    @property
    def block_id(self) -> bytes:
        return hashlib.blake2b(self.header_bytes, digest_size=32).digest()

    @property
    def tx_count(self) -> int:
        return len(self.short_mask)

    @property
    def short_count(self) -> int:
        return len(self.short_values)

    @property
    def id_width(self) -> int:
        return (self.id_bits + 7) // 8

    @property
    def header_size(self) -> int:
        """Block header, salt/width tag and the one-bit-per-entry presence bitmap."""
        return len(self.header_bytes) + _EXT.size + (self.tx_count + 7) // 8

    @property
    def size(self) -> int:
        return self.header_size + self.id_width * self.short_count + self.full.total_bytes

    @property
    def entries(self) -> list[Entry]:
        out: list[Entry] = []
        si = fi = 0
        for is_short in self.short_mask:
            if is_short:
                out.append(ShortId(int(self.short_values[si]).to_bytes(self.id_width, "little")))
                si += 1
            else:
                out.append(FullTx(self.full[fi]))
                fi += 1
        return out

    def serialize(self) -> bytes:
        parts = [
            self.header_bytes,
            _EXT.pack(self.salt, self.id_bits),
            np.packbits(self.short_mask, bitorder="little").tobytes(),
        ]
        width = self.id_width
        si = fi = 0
        full_bytes = self.full.to_bytes()
        full_offsets = np.concatenate([[0], np.cumsum(self.full.payload_size)])
        for is_short in self.short_mask:
            if is_short:
                parts.append(int(self.short_values[si]).to_bytes(width, "little"))
                si += 1
            else:
                parts.append(full_bytes[full_offsets[fi] : full_offsets[fi + 1]])
                fi += 1
        return b"".join(parts)

    @classmethod
    def deserialize(cls, data: bytes) -> "CompactBlock":
        header, pos = parse_header(data)
        header_bytes = data[:pos]
        salt, bits = _EXT.unpack_from(data, pos)
        pos += _EXT.size
        count = header.tx_count
        nbitmap = (count + 7) // 8
        mask = np.unpackbits(np.frombuffer(data, np.uint8, nbitmap, pos), bitorder="little")[:count].astype(bool)
        pos += nbitmap
        width = (bits + 7) // 8
        values = []
        full_chunks = []
        for is_short in mask:
            if is_short:
                values.append(int.from_bytes(data[pos : pos + width], "little"))
                pos += width
            else:
                (size,) = struct.unpack_from("<I", data, pos)
                full_chunks.append(data[pos : pos + size])
                pos += size
        if pos != len(data):
            raise ValueError("trailing bytes after compact block")
        full, _ = TxBatch.from_bytes(b"".join(full_chunks), len(full_chunks))
        return cls(header_bytes, mask, np.asarray(values, dtype=np.uint64), full, salt, bits)


def _compact(block: Block, mask: np.ndarray, salt: int, bits: int) -> CompactBlock:
    mask = np.asarray(mask, dtype=bool)
    values = short_ids(block.txs.ids[mask], salt, bits) if mask.any() else np.zeros(0, np.uint64)
    return CompactBlock(block.header_bytes(), mask, values, block.txs[~mask], salt, bits)


def encode(
    block: Block,
    receiver_cbf: CountingBloomFilter | None,
    salt: int | None = None,
    bits: int = SHORT_ID_BITS,
) -> CompactBlock:
    """Substitute a short id for every transaction the receiver's filter reports."""
    salt = block_salt(block.step, block.signer) if salt is None else salt
    if receiver_cbf is None or len(block.txs) == 0:
        mask = np.zeros(len(block.txs), dtype=bool)
    else:
        mask = receiver_cbf.contains_many(block.txs.ids)
    return _compact(block, mask, salt, bits)


def encode_with_mask(block: Block, mask: np.ndarray, salt: int | None = None, bits: int = SHORT_ID_BITS) -> CompactBlock:
    """Encode with a precomputed membership mask (True = send a short id)."""
    salt = block_salt(block.step, block.signer) if salt is None else salt
    return _compact(block, mask, salt, bits)


def baseline_bcb_encode(block: Block, salt: int | None = None, bits: int = SHORT_ID_BITS) -> CompactBlock:
    """Every transaction as a short id, with no knowledge of the receiver."""
    salt = block_salt(block.step, block.signer) if salt is None else salt
    return _compact(block, np.ones(len(block.txs), dtype=bool), salt, bits)


@dataclass(frozen=True, eq=False)
class DecodeResult:
    """``block`` is set when reconstruction completed; otherwise ``missing`` lists entry positions."""

    block: Block | None
    missing: tuple[int, ...] = ()
    ambiguous: int = 0
    root_mismatch: bool = False

    @property
    def complete(self) -> bool:
        return self.block is not None


def _pool_batch(pool) -> TxBatch:
    if isinstance(pool, TxBatch):
        return pool
    return pool.batch()


def _resolve(cblock: CompactBlock, pool: TxBatch) -> tuple[np.ndarray, np.ndarray]:
    """Pool row per short entry (-1 unresolved) and an ambiguity flag per short entry."""
    wanted = cblock.short_values
    rows = np.full(len(wanted), -1, dtype=np.int64)
    ambiguous = np.zeros(len(wanted), dtype=bool)
    if len(wanted) == 0 or len(pool) == 0:
        return rows, ambiguous
    keys = short_ids(pool.ids, cblock.salt, cblock.id_bits)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    left = np.searchsorted(sorted_keys, wanted, side="left")
    right = np.searchsorted(sorted_keys, wanted, side="right")
    hits = right - left
    found = hits == 1
    rows[found] = order[left[found]]
    ambiguous[:] = hits > 1
    return rows, ambiguous


def _assemble(cblock: CompactBlock, short_txs: TxBatch) -> TxBatch:
    count = cblock.tx_count
    mask = cblock.short_mask
    ids = np.empty((count, 4), np.uint64)
    size = np.empty(count, np.int64)
    nonce = np.empty(count, np.int64)
    fee = np.empty(count, np.int64)
    for dst, src in ((mask, short_txs), (~mask, cblock.full)):
        ids[dst] = src.ids
        size[dst] = src.payload_size
        nonce[dst] = src.nonce
        fee[dst] = src.fee
    return TxBatch(ids, size, nonce, fee)


def decode(cblock: CompactBlock, pool) -> DecodeResult:
    """Rebuild the block from the compact form and the receiver's pool.

    Ambiguous short ids count as missing. If every entry resolved but the
    rebuilt transaction list does not hash to the header's root (a short id
    matched a different pool transaction), every short entry is reported
    missing so the caller re-fetches them in full.
    """
    pool = _pool_batch(pool)
    rows, ambiguous = _resolve(cblock, pool)
    positions = np.flatnonzero(cblock.short_mask)
    unresolved = rows < 0
    if unresolved.any():
        return DecodeResult(None, tuple(int(p) for p in positions[unresolved]), int(ambiguous.sum()))
    txs = _assemble(cblock, pool[rows] if len(rows) else TxBatch.empty())
    try:
        return DecodeResult(block_from_header(cblock.header, txs))
    except ValueError:
        return DecodeResult(None, tuple(int(p) for p in positions), 0, root_mismatch=True)


def get_missing(block: Block, positions) -> TxBatch:
    """The sender's answer to a missing-transaction request: full txs at ``positions``."""
    idx = np.asarray(list(positions), dtype=np.int64)
    return block.txs[idx]


def missing_request_size(positions) -> int:
    """Block id plus a u16 count and u32 index per requested entry."""
    return 32 + 2 + 4 * len(positions)


def missing_response_size(txs: TxBatch) -> int:
    return 32 + 2 + txs.total_bytes


def complete_with(cblock: CompactBlock, pool, fetched: TxBatch, positions) -> Block:
    """Finish a partial decode using transactions returned by :func:`get_missing`."""
    pool = _pool_batch(pool)
    positions = np.asarray(list(positions), dtype=np.int64)
    rows, _ = _resolve(cblock, pool)
    short_pos = np.flatnonzero(cblock.short_mask)
    slot_of = {int(p): i for i, p in enumerate(short_pos)}
    fetched_slot = np.array([slot_of[int(p)] for p in positions], dtype=np.int64)
    take = np.zeros(len(short_pos), dtype=bool)
    take[fetched_slot] = True
    if (rows[~take] < 0).any():
        raise AmbiguousShortId("fetched set does not cover all unresolved entries")
    ids = np.empty((len(short_pos), 4), np.uint64)
    size = np.empty(len(short_pos), np.int64)
    nonce = np.empty(len(short_pos), np.int64)
    fee = np.empty(len(short_pos), np.int64)
    keep = ~take
    if keep.any():
        src = pool[rows[keep]]
        ids[keep], size[keep], nonce[keep], fee[keep] = src.ids, src.payload_size, src.nonce, src.fee
    ids[fetched_slot], size[fetched_slot] = fetched.ids, fetched.payload_size
    nonce[fetched_slot], fee[fetched_slot] = fetched.nonce, fetched.fee
    return block_from_header(cblock.header, _assemble(cblock, TxBatch(ids, size, nonce, fee)))
