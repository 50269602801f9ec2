"""Blocks, canonical serialization, the local ledger and fork choice."""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .consensus import OrderMode, ProtocolParams, in_turn_signer, no_turn_set

MIN_TX_SIZE = 110
TX_PREFIX = 52  # u32 size + 32-byte id + u64 nonce + i64 fee
ZERO_HASH = bytes(32)

_TX_DTYPE = np.dtype([("size", "<u4"), ("id", "<u8", (4,)), ("nonce", "<u8"), ("fee", "<i8")])
assert _TX_DTYPE.itemsize == TX_PREFIX


class ChainError(Exception):
    pass


class UnknownParent(ChainError):
    """The block's parent is not in the ledger; the caller should buffer it."""


class DuplicateBlock(ChainError):
    pass


@dataclass(frozen=True)
class Transaction:
    id: bytes
    payload_size: int = MIN_TX_SIZE
    nonce: int = 0
    fee: int = 1

    def __post_init__(self) -> None:
        if len(self.id) != 32:
            raise ValueError(f"transaction id must be 32 bytes, got {len(self.id)}")
        if self.payload_size < MIN_TX_SIZE:
            raise ValueError(f"payload_size {self.payload_size} below minimum {MIN_TX_SIZE}")


def words_to_bytes(words: np.ndarray) -> bytes:
    return np.ascontiguousarray(words, dtype="<u8").tobytes()


def bytes_to_words(tx_id: bytes) -> np.ndarray:
    return np.frombuffer(tx_id, dtype="<u8").astype(np.uint64).reshape(1, 4)


class TxBatch:
    """Column-oriented, ordered set of transactions.

    ``ids`` is an ``(N, 4)`` uint64 array holding the 32-byte ids as little
    endian words. Blocks and pools carry batches instead of lists of
    :class:`Transaction` so that per-transaction hashing stays vectorized.
    """

    __slots__ = ("ids", "payload_size", "nonce", "fee")

    def __init__(self, ids, payload_size, nonce=None, fee=None):
        self.ids = np.ascontiguousarray(ids, dtype=np.uint64).reshape(-1, 4)
        count = self.ids.shape[0]
        self.payload_size = np.broadcast_to(np.asarray(payload_size, dtype=np.int64), (count,)).copy()
        self.nonce = np.zeros(count, np.int64) if nonce is None else np.asarray(nonce, dtype=np.int64).copy()
        self.fee = np.ones(count, np.int64) if fee is None else np.asarray(fee, dtype=np.int64).copy()
        if count and self.payload_size.min() < MIN_TX_SIZE:
            raise ValueError(f"payload_size below minimum {MIN_TX_SIZE}")

    @classmethod
    def empty(cls) -> "TxBatch":
        return cls(np.zeros((0, 4), np.uint64), np.zeros(0, np.int64))

    @classmethod
    def from_transactions(cls, txs: Iterable[Transaction]) -> "TxBatch":
        txs = list(txs)
        if not txs:
            return cls.empty()
        ids = np.frombuffer(b"".join(t.id for t in txs), dtype="<u8").reshape(-1, 4)
        return cls(
            ids,
            [t.payload_size for t in txs],
            [t.nonce for t in txs],
            [t.fee for t in txs],
        )

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            i = int(key)
            return Transaction(
                words_to_bytes(self.ids[i]),
                int(self.payload_size[i]),
                int(self.nonce[i]),
                int(self.fee[i]),
            )
        return TxBatch(self.ids[key], self.payload_size[key], self.nonce[key], self.fee[key])

    def __iter__(self) -> Iterator[Transaction]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TxBatch):
            return NotImplemented
        return (
            len(self) == len(other)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.payload_size, other.payload_size)
            and np.array_equal(self.nonce, other.nonce)
            and np.array_equal(self.fee, other.fee)
        )

    def __repr__(self) -> str:
        return f"TxBatch(len={len(self)})"

    @staticmethod
    def concat(batches: Sequence["TxBatch"]) -> "TxBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return TxBatch.empty()
        return TxBatch(
            np.concatenate([b.ids for b in batches]),
            np.concatenate([b.payload_size for b in batches]),
            np.concatenate([b.nonce for b in batches]),
            np.concatenate([b.fee for b in batches]),
        )

    @property
    def total_bytes(self) -> int:
        return int(self.payload_size.sum())

    @property
    def fee_total(self) -> int:
        return int(self.fee.sum())

    def id_bytes(self, i: int) -> bytes:
        return words_to_bytes(self.ids[i])

    def to_bytes(self) -> bytes:
        """Canonical encoding; each transaction occupies exactly ``payload_size`` bytes."""
        count = len(self)
        if count == 0:
            return b""
        prefix = np.zeros(count, dtype=_TX_DTYPE)
        prefix["size"] = self.payload_size
        prefix["id"] = self.ids
        prefix["nonce"] = self.nonce.astype(np.uint64)
        prefix["fee"] = self.fee
        raw = prefix.view(np.uint8).reshape(count, TX_PREFIX)
        offsets = np.zeros(count, dtype=np.int64)
        np.cumsum(self.payload_size[:-1], out=offsets[1:])
        buf = np.zeros(self.total_bytes, dtype=np.uint8)
        buf[offsets[:, None] + np.arange(TX_PREFIX)[None, :]] = raw
        return buf.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, count: int) -> tuple["TxBatch", int]:
        """Decode ``count`` transactions; returns the batch and bytes consumed."""
        offsets = []
        pos = 0
        for _ in range(count):
            (size,) = struct.unpack_from("<I", data, pos)
            if size < MIN_TX_SIZE or pos + size > len(data):
                raise ValueError(f"malformed transaction at offset {pos}")
            offsets.append(pos)
            pos += size
        if count == 0:
            return cls.empty(), 0
        buf = np.frombuffer(data, dtype=np.uint8, count=pos)
        idx = np.asarray(offsets, dtype=np.int64)[:, None] + np.arange(TX_PREFIX)[None, :]
        prefix = np.ascontiguousarray(buf[idx]).view(_TX_DTYPE).reshape(count)
        batch = cls(
            prefix["id"].astype(np.uint64),
            prefix["size"].astype(np.int64),
            prefix["nonce"].astype(np.int64),
            prefix["fee"],
        )
        return batch, pos


class BlockKind(str, enum.Enum):
    GENESIS = "genesis"
    IN_TURN = "in_turn"
    NO_TURN = "no_turn"


KIND_WEIGHT = {BlockKind.GENESIS: 0, BlockKind.IN_TURN: 2, BlockKind.NO_TURN: 1}
_KIND_CODE = {BlockKind.GENESIS: 0, BlockKind.IN_TURN: 1, BlockKind.NO_TURN: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}

# step, parent, signer, kind, weight, created_at, tx_root, tx_count, n_uncles
_HEADER = struct.Struct("<Q32siBBd32sIH")
_UNCLE = struct.Struct("<Qi")
HEADER_FIXED = _HEADER.size


def tx_root(txs: TxBatch) -> bytes:
    h = hashlib.blake2b(digest_size=32)
    h.update(np.ascontiguousarray(txs.ids, dtype="<u8").tobytes())
    h.update(txs.payload_size.astype("<u4").tobytes())
    h.update(txs.nonce.astype("<u8").tobytes())
    h.update(txs.fee.astype("<i8").tobytes())
    return h.digest()


@dataclass(frozen=True, eq=False)
class Block:
    step: int
    parent_id: bytes
    signer: int
    kind: BlockKind
    txs: TxBatch = field(default_factory=TxBatch.empty)
    weight: int | None = None
    uncle_refs: tuple[tuple[int, int], ...] = ()
    created_at: float = 0.0

    def __post_init__(self) -> None:
        kind = BlockKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.weight is None:
            object.__setattr__(self, "weight", KIND_WEIGHT[kind])
        elif self.weight != KIND_WEIGHT[kind]:
            raise ValueError(f"{kind.value} block must have weight {KIND_WEIGHT[kind]}, got {self.weight}")
        object.__setattr__(self, "uncle_refs", tuple((int(s), int(g)) for s, g in self.uncle_refs))
        root = tx_root(self.txs)
        object.__setattr__(self, "_tx_root", root)
        object.__setattr__(self, "id", hashlib.blake2b(self.header_bytes(), digest_size=32).digest())

    def header_bytes(self) -> bytes:
        head = _HEADER.pack(
            self.step,
            self.parent_id,
            self.signer,
            _KIND_CODE[self.kind],
            self.weight,
            float(self.created_at),
            self._tx_root,
            len(self.txs),
            len(self.uncle_refs),
        )
        return head + b"".join(_UNCLE.pack(s, g) for s, g in self.uncle_refs)

    @property
    def header_size(self) -> int:
        return HEADER_FIXED + _UNCLE.size * len(self.uncle_refs)

    @property
    def size(self) -> int:
        """Bytes on the wire for the full (uncompressed) block."""
        return self.header_size + self.txs.total_bytes

    @property
    def tx_count(self) -> int:
        return len(self.txs)

    @property
    def fee_total(self) -> int:
        return self.txs.fee_total

    def serialize(self) -> bytes:
        return self.header_bytes() + self.txs.to_bytes()

    @classmethod
    def deserialize(cls, data: bytes) -> "Block":
        header, pos = parse_header(data)
        txs, used = TxBatch.from_bytes(data[pos:], header.tx_count)
        if pos + used != len(data):
            raise ValueError("trailing bytes after block body")
        return block_from_header(header, txs)

    def to_json(self) -> dict:
        return {
            "id": self.id.hex(),
            "step": self.step,
            "parent_id": self.parent_id.hex(),
            "signer": self.signer,
            "kind": self.kind.value,
            "weight": self.weight,
            "created_at": self.created_at,
            "uncle_refs": [list(u) for u in self.uncle_refs],
            "tx_count": len(self.txs),
            "size": self.size,
            "txs": [self.txs.id_bytes(i).hex() for i in range(len(self.txs))],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def __repr__(self) -> str:
        return (
            f"Block(step={self.step}, signer={self.signer}, kind={self.kind.value}, "
            f"txs={len(self.txs)}, id={self.id.hex()[:10]})"
        )


class BlockHeader(NamedTuple):
    step: int
    parent_id: bytes
    signer: int
    kind: BlockKind
    weight: int
    created_at: float
    tx_root: bytes
    tx_count: int
    uncle_refs: tuple[tuple[int, int], ...]


def parse_header(data: bytes) -> tuple[BlockHeader, int]:
    """Decode a block header; returns it with the number of bytes consumed."""
    step, parent, signer, code, weight, created, root, count, n_uncles = _HEADER.unpack_from(data, 0)
    pos = _HEADER.size
    uncles = []
    for _ in range(n_uncles):
        uncles.append(_UNCLE.unpack_from(data, pos))
        pos += _UNCLE.size
    header = BlockHeader(step, parent, signer, _CODE_KIND[code], weight, created, root, count, tuple(uncles))
    return header, pos


def block_from_header(header: BlockHeader, txs: TxBatch) -> Block:
    block = Block(
        header.step,
        header.parent_id,
        header.signer,
        header.kind,
        txs,
        header.weight,
        header.uncle_refs,
        header.created_at,
    )
    if block._tx_root != header.tx_root:
        raise ValueError("transaction root mismatch")
    return block


def genesis() -> Block:
    return Block(0, ZERO_HASH, -1, BlockKind.GENESIS)


# ------------------------------------------------------------------ ledger


class UpdateKind(str, enum.Enum):
    EXTENDED = "extended"
    FORK_CREATED = "fork_created"
    REORGED = "reorged"
    REJECTED = "rejected"


@dataclass(frozen=True)
class LedgerUpdate:
    kind: UpdateKind
    head: bytes
    previous_head: bytes
    adopted: tuple[Block, ...] = ()
    abandoned: tuple[Block, ...] = ()
    deadlock_tie: bool = False
    reason: str | None = None

    @property
    def head_changed(self) -> bool:
        return self.head != self.previous_head


@dataclass(frozen=True)
class RecentSigners:
    """Signers of the last ``floor(n/2)`` blocks ending at ``parent_id`` (oldest first)."""

    signers: tuple[int, ...]
    parent_id: bytes
    parent_step: int
    parent_signer: int | None

    def __contains__(self, node: int) -> bool:
        return node in self.signers


class Ledger:
    """Block tree with weight-based fork choice.

    The head is the block with the greatest cumulative weight; equal weights
    go to the lexicographically smaller block id and are reported as a
    deadlock tie.
    """

    def __init__(self, root: Block | None = None):
        root = root or genesis()
        self.genesis = root
        self.blocks_by_id: dict[bytes, Block] = {root.id: root}
        self.total_weight: dict[bytes, int] = {root.id: 0}
        self.children: dict[bytes, list[bytes]] = {root.id: []}
        self.by_step: dict[int, list[bytes]] = {root.step: [root.id]}
        self.head: bytes = root.id
        self.committed: list[bytes] = [root.id]
        self.deadlock_ties = 0

    def __contains__(self, block_id: bytes) -> bool:
        return block_id in self.blocks_by_id

    def __len__(self) -> int:
        return len(self.blocks_by_id)

    @property
    def head_block(self) -> Block:
        return self.blocks_by_id[self.head]

    def _better(self, a: bytes, b: bytes) -> bool:
        wa, wb = self.total_weight[a], self.total_weight[b]
        return wa > wb or (wa == wb and a < b)

    def tips(self) -> list[bytes]:
        return [bid for bid, kids in self.children.items() if not kids]

    def append_candidate(self, block: Block) -> LedgerUpdate:
        if block.id in self.blocks_by_id:
            raise DuplicateBlock(block.id.hex())
        parent = self.blocks_by_id.get(block.parent_id)
        if parent is None:
            raise UnknownParent(block.parent_id.hex())
        prev = self.head
        if block.step <= parent.step:
            return LedgerUpdate(UpdateKind.REJECTED, prev, prev, reason="step not after parent")
        if block.kind is BlockKind.GENESIS:
            return LedgerUpdate(UpdateKind.REJECTED, prev, prev, reason="second genesis")

        bid = block.id
        self.blocks_by_id[bid] = block
        self.total_weight[bid] = self.total_weight[parent.id] + block.weight
        self.children[bid] = []
        self.children[parent.id].append(bid)
        self.by_step.setdefault(block.step, []).append(bid)

        tie = self.total_weight[bid] == self.total_weight[prev]
        if tie:
            self.deadlock_ties += 1
        if not self._better(bid, prev):
            return LedgerUpdate(UpdateKind.FORK_CREATED, prev, prev, deadlock_tie=tie)

        if block.parent_id == prev:
            self.head = bid
            self.committed.append(bid)
            return LedgerUpdate(UpdateKind.EXTENDED, bid, prev, adopted=(block,))

        adopted, abandoned = self._switch_head(bid)
        kind = UpdateKind.FORK_CREATED if tie else UpdateKind.REORGED
        return LedgerUpdate(kind, bid, prev, adopted=adopted, abandoned=abandoned, deadlock_tie=tie)

    def _switch_head(self, new_head: bytes) -> tuple[tuple[Block, ...], tuple[Block, ...]]:
        adopted = []
        cursor = new_head
        on_main = {bid: i for i, bid in enumerate(self.committed)}
        while cursor not in on_main:
            blk = self.blocks_by_id[cursor]
            adopted.append(blk)
            cursor = blk.parent_id
        fork_at = on_main[cursor]
        abandoned = tuple(self.blocks_by_id[b] for b in reversed(self.committed[fork_at + 1 :]))
        adopted.reverse()
        del self.committed[fork_at + 1 :]
        self.committed.extend(b.id for b in adopted)
        self.head = new_head
        return tuple(adopted), abandoned

    def ancestors(self, block_id: bytes) -> Iterator[Block]:
        """Walk from ``block_id`` back to genesis, inclusive."""
        cursor = block_id
        while True:
            blk = self.blocks_by_id[cursor]
            yield blk
            if blk.kind is BlockKind.GENESIS:
                return
            cursor = blk.parent_id

    def recent_signers(self, parent_id: bytes, window: int) -> RecentSigners:
        parent = self.blocks_by_id[parent_id]
        signers = []
        for blk in self.ancestors(parent_id):
            if blk.kind is BlockKind.GENESIS or len(signers) >= window:
                break
            signers.append(blk.signer)
        signers.reverse()
        last = None if parent.kind is BlockKind.GENESIS else parent.signer
        return RecentSigners(tuple(signers), parent_id, parent.step, last)

    def committed_blocks(self) -> list[Block]:
        return [self.blocks_by_id[b] for b in self.committed]

    def blocks_at_step(self, step: int) -> list[Block]:
        return [self.blocks_by_id[b] for b in self.by_step.get(step, ())]

    def uncle_candidates(self, parent_id: bytes, step: int, window: int) -> tuple[tuple[int, int], ...]:
        """(step, signer) pairs of known side blocks within ``window`` steps before ``step``."""
        lo = step - window
        on_chain = set()
        referenced = set()
        for blk in self.ancestors(parent_id):
            if blk.step < lo:
                break
            on_chain.add(blk.id)
            referenced.update(blk.uncle_refs)
        refs = set()
        for s in range(max(lo, 1), step):
            for bid in self.by_step.get(s, ()):
                if bid in on_chain:
                    continue
                blk = self.blocks_by_id[bid]
                ref = (blk.step, blk.signer)
                if ref not in referenced:
                    refs.add(ref)
        return tuple(sorted(refs))


# ------------------------------------------------------------- verification


class RejectReason(str, enum.Enum):
    BAD_PARENT = "bad_parent"
    TOO_MANY_TXS = "too_many_txs"
    BAD_KIND = "bad_kind"
    RECENT_SIGNER = "recent_signer"
    NOT_AUTHORIZED = "not_authorized"
    BAD_UNCLE = "bad_uncle"


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    reason: RejectReason | None = None

    def __bool__(self) -> bool:
        return self.ok


ACCEPT = VerifyResult(True)


def verify_block(block: Block, params: ProtocolParams, recents: RecentSigners) -> VerifyResult:
    """Check signer authorization, the recents window, parent linkage and capacity.

    ``recents`` must describe the chain ending at the block's declared parent.
    """
    if block.parent_id != recents.parent_id or block.step != recents.parent_step + 1:
        return VerifyResult(False, RejectReason.BAD_PARENT)
    if len(block.txs) > params.m:
        return VerifyResult(False, RejectReason.TOO_MANY_TXS)
    if block.kind is BlockKind.GENESIS:
        return VerifyResult(False, RejectReason.BAD_KIND)
    if block.signer in recents.signers:
        return VerifyResult(False, RejectReason.RECENT_SIGNER)
    scheduled = in_turn_signer(block.step, params.order_mode, recents.parent_signer, params.n, recents.signers)
    if block.kind is BlockKind.IN_TURN:
        if block.signer != scheduled:
            return VerifyResult(False, RejectReason.NOT_AUTHORIZED)
    elif block.signer not in no_turn_set(block.step, scheduled, recents.signers, params.n):
        return VerifyResult(False, RejectReason.NOT_AUTHORIZED)
    for s, _signer in block.uncle_refs:
        if not (block.step - params.n <= s < block.step) or s < 1:
            return VerifyResult(False, RejectReason.BAD_UNCLE)
    return ACCEPT


__all__ = [
    "Block",
    "BlockHeader",
    "BlockKind",
    "ChainError",
    "DuplicateBlock",
    "Ledger",
    "LedgerUpdate",
    "OrderMode",
    "RecentSigners",
    "RejectReason",
    "Transaction",
    "TxBatch",
    "UnknownParent",
    "UpdateKind",
    "VerifyResult",
    "block_from_header",
    "genesis",
    "parse_header",
    "verify_block",
]
