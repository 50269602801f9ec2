"""Transaction pools.

:class:`TxPool` is a small standalone pool with an attached filter, used by
library callers and tests. :class:`TxTable` holds the pools of every node of
a simulation in one column store: one row per transaction, ordered by global
sequence number, plus an ``(n, rows)`` presence matrix.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel
from .cbf import CountingBloomFilter, UnderflowAttempt
from .chain import MIN_TX_SIZE, Transaction, TxBatch


class TxPool:
    """Ordered set of transactions keyed by id, mirrored into an optional filter."""

    def __init__(self, txs=None, cbf: CountingBloomFilter | None = None):
        self._txs: dict[bytes, Transaction] = {}
        self.cbf = cbf
        if txs is not None:
            self.add(txs)

    def __len__(self) -> int:
        return len(self._txs)

    def __contains__(self, tx_id: bytes) -> bool:
        return tx_id in self._txs

    def add(self, txs) -> int:
        if isinstance(txs, Transaction):
            txs = [txs]
        fresh = [t for t in txs if t.id not in self._txs]
        for t in fresh:
            self._txs[t.id] = t
        if self.cbf is not None and fresh:
            self.cbf.add(b"".join(t.id for t in fresh))
        return len(fresh)

    def remove(self, tx_ids) -> int:
        if isinstance(tx_ids, (bytes, bytearray)):
            tx_ids = [bytes(tx_ids)]
        gone = [i for i in tx_ids if i in self._txs]
        for i in gone:
            del self._txs[i]
        if self.cbf is not None and gone:
            try:
                self.cbf.remove(b"".join(gone))
            except UnderflowAttempt:
                self.cbf.rebuild(self.batch().ids)
        return len(gone)

    def batch(self) -> TxBatch:
        return TxBatch.from_transactions(self._txs.values())

    def __iter__(self):
        return iter(self._txs.values())


class TxTable:
    """Per-node pools over a shared, append-only transaction stream.

    Transaction ``g`` (global sequence number) has id ``txid_words(g, seed)``
    and carries ``g`` as its nonce, which is how block contents map back to
    rows. Rows nobody holds any more are dropped by :meth:`compact`.
    """

    def __init__(self, n: int, seed: int = 0, payload_size: int = MIN_TX_SIZE, cbf_k: int = 4, cbf_length: int = 1024):
        self.n = n
        self.seed = seed
        self.payload_size = int(payload_size)
        self.cbf_k = cbf_k
        self.cbf_length = cbf_length
        self.next_g = 0
        self.g = np.zeros(0, np.int64)
        self.ids = np.zeros((0, 4), np.uint64)
        self.fee = np.zeros(0, np.int64)
        self.cbf_idx = np.zeros((0, cbf_k), np.int64)
        self.present = np.zeros((n, 0), dtype=bool)
        # Rows a node has held at some point, in its pool or inside a block it
        # imported; compact-block decoding resolves short ids against these.
        self.seen = np.zeros((n, 0), dtype=bool)
        self.cbf_salt = 0
        # Bumped whenever existing rows move (restore, compact).
        self.layout = 0

    def __len__(self) -> int:
        return self.g.shape[0]

    def configure_filters(self, length: int, salt: int) -> None:
        self.cbf_length = int(length)
        self.cbf_salt = int(salt)
        self.cbf_idx = _accel.cbf_indices(self.ids, salt, self.cbf_k, length) if len(self) else np.zeros((0, self.cbf_k), np.int64)

    def live_count(self) -> int:
        return int(self.present.any(axis=0).sum())

    def generate(self, count: int, similarity: float, rng: np.random.Generator) -> np.ndarray:
        """Append ``count`` new transactions; returns the new row indices.

        Each transaction lands at one random origin node and independently at
        every other node with probability ``similarity``.
        """
        if count <= 0:
            return np.zeros(0, np.int64)
        g = np.arange(self.next_g, self.next_g + count, dtype=np.int64)
        self.next_g += count
        ids = _accel.txid_words(g, self.seed)
        fee = 1 + (ids[:, 1] % np.uint64(10)).astype(np.int64)
        present = rng.random((self.n, count)) < similarity
        origin = rng.integers(0, self.n, size=count)
        present[origin, np.arange(count)] = True
        idx = _accel.cbf_indices(ids, self.cbf_salt, self.cbf_k, self.cbf_length)
        start = len(self)
        self.g = np.concatenate([self.g, g])
        self.ids = np.concatenate([self.ids, ids])
        self.fee = np.concatenate([self.fee, fee])
        self.cbf_idx = np.concatenate([self.cbf_idx, idx])
        self.present = np.concatenate([self.present, present], axis=1)
        self.seen = np.concatenate([self.seen, present], axis=1)
        return np.arange(start, start + count)

    def top_up(self, target: int, similarity: float, rng: np.random.Generator) -> np.ndarray:
        return self.generate(target - self.live_count(), similarity, rng)

    def batch(self, rows) -> TxBatch:
        rows = np.asarray(rows, dtype=np.int64)
        return TxBatch(self.ids[rows], np.full(rows.shape[0], self.payload_size), self.g[rows], self.fee[rows])

    def pool_rows(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.present[node])

    def pool_batch(self, node: int) -> TxBatch:
        return self.batch(self.pool_rows(node))

    def pick(self, node: int, m: int) -> np.ndarray:
        """Oldest ``m`` rows held by ``node``."""
        return self.pool_rows(node)[:m]

    def rows_of(self, txs: TxBatch) -> tuple[np.ndarray, np.ndarray]:
        """Row index per transaction and a mask of which ones still have a row."""
        g = txs.nonce
        if len(self) == 0:
            return np.zeros(len(g), np.int64), np.zeros(len(g), bool)
        rows = np.minimum(np.searchsorted(self.g, g), len(self) - 1)
        return rows, self.g[rows] == g

    def seen_batch(self, node: int) -> TxBatch:
        return self.batch(np.flatnonzero(self.seen[node]))

    def mark_seen(self, node: int, txs: TxBatch) -> None:
        if len(txs):
            rows, ok = self.rows_of(txs)
            self.seen[node, rows[ok]] = True

    def remove(self, node: int, txs: TxBatch) -> np.ndarray:
        """Drop ``txs`` from ``node``'s pool; returns the rows actually removed."""
        if len(txs) == 0:
            return np.zeros(0, np.int64)
        rows, ok = self.rows_of(txs)
        rows = rows[ok]
        rows = rows[self.present[node, rows]]
        self.present[node, rows] = False
        return rows

    def reinject(self, node: int, txs: TxBatch) -> np.ndarray:
        """Return ``txs`` to ``node``'s pool, restoring rows that were compacted away."""
        if len(txs) == 0:
            return np.zeros(0, np.int64)
        rows, ok = self.rows_of(txs)
        if not ok.all():
            self._restore(txs[~ok])
            rows, ok = self.rows_of(txs)
        rows = rows[~self.present[node, rows]]
        self.present[node, rows] = True
        self.seen[node, rows] = True
        return rows

    def _restore(self, txs: TxBatch) -> None:
        g = txs.nonce
        at = np.searchsorted(self.g, g)
        self.g = np.insert(self.g, at, g)
        self.ids = np.insert(self.ids, at, txs.ids, axis=0)
        self.fee = np.insert(self.fee, at, txs.fee)
        idx = _accel.cbf_indices(txs.ids, self.cbf_salt, self.cbf_k, self.cbf_length)
        self.cbf_idx = np.insert(self.cbf_idx, at, idx, axis=0)
        self.present = np.insert(self.present, at, False, axis=1)
        self.seen = np.insert(self.seen, at, False, axis=1)
        self.layout += 1

    def compact(self) -> np.ndarray:
        """Drop rows no node holds; returns the old-to-new row map (-1 for dropped)."""
        keep = self.present.any(axis=0)
        remap = np.full(len(self), -1, dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        self.g = self.g[keep]
        self.ids = self.ids[keep]
        self.fee = self.fee[keep]
        self.cbf_idx = self.cbf_idx[keep]
        self.present = self.present[:, keep]
        self.seen = self.seen[:, keep]
        self.layout += 1
        return remap


def pending_target(m: int, similarity: float, slack: float = 2.5) -> int:
    """Live transactions to keep so each node holds about ``slack * m`` of them."""
    if m == 0:
        return 0
    return int(math.ceil(slack * m / max(similarity, 1e-9)))
