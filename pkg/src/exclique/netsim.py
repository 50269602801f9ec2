"""Discrete-event kernel and full-mesh network model.

Time is in milliseconds. Each unordered node pair gets a link with a fixed
propagation delay and loss rate, drawn once from a seeded generator. Every
node has one uplink of ``bandwidth`` bits/s: messages a node sends at the
same moment share the uplink (processor sharing), and later sends queue
behind earlier ones. A lost attempt is retransmitted after
``RTO = 2 * base_delay + transfer_time``; after ``max_retries`` retransmits
the message is reported undeliverable.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class LinkModel:
    base_delay: float
    bandwidth: float = 32e6
    loss_rate: float = 0.0

    def serialization_time(self, nbytes: int) -> float:
        if math.isinf(self.bandwidth):
            return 0.0
        return nbytes * 8000.0 / self.bandwidth

    def transfer_time(self, nbytes: int) -> float:
        return self.base_delay + self.serialization_time(nbytes)

    def rto(self, nbytes: int) -> float:
        return 2.0 * self.base_delay + self.transfer_time(nbytes)


@dataclass
class NetworkConfig:
    bandwidth: float = 32e6
    delay_range: tuple[float, float] = (0.0, 200.0)
    loss_range: tuple[float, float] = (0.0, 0.1)
    max_retries: int = 5
    # Overrides replacing the per-link draws; used for controlled-timing runs.
    fixed_base_delay: float | None = None
    fixed_loss: float | None = None
    shared_uplink: bool = True

    def __post_init__(self) -> None:
        lo, hi = self.delay_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad delay range {self.delay_range}")
        lo, hi = self.loss_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"bad loss range {self.loss_range}")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        self.delay_range = tuple(self.delay_range)
        self.loss_range = tuple(self.loss_range)


@dataclass(frozen=True)
class Delivery:
    dst: int
    at: float | None  # None when undeliverable
    attempts: int
    nbytes: int

    @property
    def delivered(self) -> bool:
        return self.at is not None


class Network:
    """Link table plus per-node uplink state; owns the loss RNG."""

    def __init__(self, n: int, config: NetworkConfig | None = None, seed: int = 0):
        self.n = n
        self.config = config or NetworkConfig()
        cfg = self.config
        rng = np.random.default_rng([seed, 0x11E7])
        pairs = n * (n - 1) // 2
        delays = rng.uniform(*cfg.delay_range, size=pairs)
        losses = rng.uniform(*cfg.loss_range, size=pairs)
        if cfg.fixed_base_delay is not None:
            delays[:] = cfg.fixed_base_delay
        if cfg.fixed_loss is not None:
            losses[:] = cfg.fixed_loss
        self.base = np.zeros((n, n))
        self.loss = np.zeros((n, n))
        iu = np.triu_indices(n, 1)
        self.base[iu] = delays
        self.loss[iu] = losses
        self.base = self.base + self.base.T
        self.loss = self.loss + self.loss.T
        self.uplink_free_at = np.zeros(n)
        self.loss_rng = np.random.default_rng([seed, 0x1055])
        self.bytes_sent = np.zeros(n, dtype=np.int64)

    def link(self, a: int, b: int) -> LinkModel:
        if a == b:
            raise ValueError("no self links")
        return LinkModel(float(self.base[a, b]), self.config.bandwidth, float(self.loss[a, b]))

    def _serialize(self, nbytes: float) -> float:
        if math.isinf(self.config.bandwidth):
            return 0.0
        return nbytes * 8000.0 / self.config.bandwidth

    def _retry(self, src: int, dst: int, nbytes: int, first_arrival: float) -> Delivery:
        link = self.link(src, dst)
        at = first_arrival
        attempts = 1
        while link.loss_rate > 0 and self.loss_rng.random() < link.loss_rate:
            if attempts > self.config.max_retries:
                return Delivery(dst, None, attempts, nbytes)
            at += link.rto(nbytes)
            attempts += 1
        return Delivery(dst, at, attempts, nbytes)

    def broadcast(self, src: int, dsts: Sequence[int], sizes: Sequence[int], now: float) -> list[Delivery]:
        """Send one message per destination, sharing ``src``'s uplink.

        With processor sharing the ``i``-th smallest of ``N`` messages finishes
        serializing after ``(sum of smaller sizes + (N - i) * size_i) * 8 / B``.
        """
        if len(dsts) != len(sizes):
            raise ValueError("one size per destination")
        if any(d == src for d in dsts):
            raise ValueError("cannot send to self")
        if not dsts:
            return []
        sizes = np.asarray(sizes, dtype=np.float64)
        start = max(now, float(self.uplink_free_at[src])) if self.config.shared_uplink else now
        if self.config.shared_uplink:
            order = np.argsort(sizes, kind="stable")
            sorted_sizes = sizes[order]
            count = len(sizes)
            before = np.concatenate([[0.0], np.cumsum(sorted_sizes)[:-1]])
            finish_sorted = before + (count - np.arange(count)) * sorted_sizes
            finish = np.empty(count)
            finish[order] = finish_sorted
            finish_ms = np.array([self._serialize(x) for x in finish])
            self.uplink_free_at[src] = start + self._serialize(float(sizes.sum()))
        else:
            finish_ms = np.array([self._serialize(x) for x in sizes])
        self.bytes_sent[src] += int(sizes.sum())
        out = []
        for dst, nbytes, ser in zip(dsts, sizes, finish_ms):
            arrival = start + float(ser) + float(self.base[src, dst])
            out.append(self._retry(src, int(dst), int(nbytes), arrival))
        return out

    def send(self, src: int, dst: int, nbytes: int, now: float) -> Delivery:
        return self.broadcast(src, [dst], [nbytes], now)[0]


# ------------------------------------------------------------- event kernel


@dataclass(order=True)
class SimEvent:
    at: float
    seq: int
    kind: str = field(compare=False)
    node: int = field(compare=False, default=-1)
    data: Any = field(compare=False, default=None)


class EventQueue:
    """Min-heap of events ordered by ``(at, seq)``; ``seq`` is assigned at scheduling."""

    def __init__(self):
        self._heap: list[SimEvent] = []
        self._seq = 0
        self.now = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, at: float, kind: str, node: int = -1, data: Any = None) -> SimEvent:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past: {at} < {self.now}")
        event = SimEvent(float(at), self._seq, kind, node, data)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> SimEvent:
        event = heapq.heappop(self._heap)
        self.now = event.at
        return event

    def peek_time(self) -> float | None:
        return self._heap[0].at if self._heap else None

    def run_until(self, t_end: float, handler: Callable[[SimEvent], None]) -> float:
        """Dispatch events with ``at <= t_end`` in order; the clock ends at ``t_end``."""
        while self._heap and self._heap[0].at <= t_end:
            handler(self.pop())
        self.now = max(self.now, t_end)
        return self.now


def schedule(queue: EventQueue, event: SimEvent) -> None:
    queue.schedule(event.at, event.kind, event.node, event.data)


def run_until(queue: EventQueue, t_end: float, handler: Callable[[SimEvent], None]) -> float:
    return queue.run_until(t_end, handler)


# -------------------------------------------------------------------- trace


def _clean(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    return value


class Trace:
    """Append-only list of event records, serialized as newline-delimited JSON."""

    def __init__(self):
        self.records: list[dict] = []

    def emit(self, type_: str, t: float, **fields) -> None:
        rec = {"type": type_, "t": round(float(t), 6)}
        for key, value in fields.items():
            rec[key] = _clean(value)
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def of_type(self, type_: str) -> list[dict]:
        return [r for r in self.records if r["type"] == type_]

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @staticmethod
    def load(path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


def measure_broadcast_time(created_at: float, reconstructed_at: Iterable[float]) -> float:
    """Time from the first send until the last receiver holds the reconstructed block."""
    times = list(reconstructed_at)
    if not times:
        return 0.0
    return max(times) - created_at
