"""Whole-network simulation: nodes, workload, faults and the event loop."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _accel, pcb
from .chain import Block, genesis
from .consensus import DelaySample, PcbMode, ProtocolParams, sample_delay
from .netsim import EventQueue, Network, NetworkConfig, Trace
from .node import BlockMsg, CbfMsg, MissingRequest, MissingResponse, Node
from .txpool import TxTable, pending_target


@dataclass
class FaultScript:
    """Scripted in-turn failures and forced no-turn delays.

    ``fail_rate`` selects failing steps at random with the given long-run
    frequency; with ``nonadjacent`` no two consecutive steps both fail.
    ``delay_overrides`` maps ``(step, node)`` to a fixed no-turn delay.
    """

    fail_steps: tuple[int, ...] = ()
    fail_rate: float = 0.0
    nonadjacent: bool = True
    first_step: int = 2
    delay_overrides: dict = field(default_factory=dict)

    def failing_steps(self, steps: int, seed: int) -> frozenset[int]:
        chosen = set(int(s) for s in self.fail_steps)
        if self.fail_rate > 0:
            if not 0 < self.fail_rate < (0.5 if self.nonadjacent else 1.0):
                raise ValueError(f"fail_rate out of range: {self.fail_rate}")
            rng = np.random.default_rng([seed, 0xFA11])
            q = self.fail_rate / (1.0 - self.fail_rate) if self.nonadjacent else self.fail_rate
            draws = rng.random(steps + 1)
            prev = False
            for h in range(self.first_step, steps + 1):
                if self.nonadjacent and prev:
                    prev = False
                    continue
                prev = bool(draws[h] < q)
                if prev:
                    chosen.add(h)
        return frozenset(chosen)


@dataclass
class SimConfig:
    params: ProtocolParams
    steps: int = 100
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    similarity: float = 0.9
    tx_size: int = 110
    # A backlog of 2.5 blocks keeps the oldest m transactions older than the
    # filters peers sent after the previous block.
    pool_slack: float = 2.5
    # A block leaves ~m*(1-similarity) absent entries per receiver, and any
    # false positive among them costs the whole broadcast a round trip, so
    # filters are sized well below the library default false-positive rate.
    cbf_k: int = 8
    cbf_c: int = 4
    cbf_bits_per_item: int = 24
    faults: FaultScript = field(default_factory=FaultScript)
    drain: float | None = None
    compact_every: int = 10

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.similarity <= 1.0:
            raise ValueError("similarity must be in [0, 1]")


@dataclass
class SimResult:
    config: SimConfig
    trace: Trace
    committed: list[Block]
    blocks: dict[bytes, Block]
    failing_steps: frozenset[int]
    betas: dict[int, dict[int, float]]

    @property
    def params(self) -> ProtocolParams:
        return self.config.params


class Simulation:
    def __init__(self, config: SimConfig):
        self.config = config
        self.params = config.params
        params = self.params
        self.last_step = config.steps
        self.queue = EventQueue()
        self.trace = Trace()
        self.net = Network(params.n, config.network, seed=config.seed)
        self.genesis = genesis()
        self.blocks: dict[bytes, Block] = {self.genesis.id: self.genesis}
        self.target = pending_target(params.m, config.similarity, config.pool_slack)
        expected_pool = max(16, int(np.ceil(self.target * max(config.similarity, 1.0 / params.n))))
        self.cbf_length = config.cbf_bits_per_item * expected_pool
        self.cbf_salt = int(_accel.hash_words(np.array([[config.seed, 0xCBF, 0, 0]], np.uint64), 7)[0])
        self.table = TxTable(params.n, seed=config.seed, payload_size=config.tx_size, cbf_k=config.cbf_k)
        self.table.configure_filters(self.cbf_length, self.cbf_salt)
        self.workload_rng = np.random.default_rng([config.seed, 0x7000])
        self.failing = config.faults.failing_steps(config.steps, config.seed)
        self.nodes = [Node(self, i) for i in range(params.n)]
        self.schedule_seen: dict[int, int] = {}
        self.failures_logged: set[int] = set()
        self._reconstructed: dict[bytes, int] = {}
        self._resolve_cache: dict[bytes, tuple] = {}

    # ------------------------------------------------------------ services

    def in_turn_fails(self, step: int) -> bool:
        return step in self.failing

    def log_failure(self, step: int, node: int, now: float) -> None:
        if step not in self.failures_logged:
            self.failures_logged.add(step)
            self.trace.emit("in_turn_failed", now, node=node, step=step)

    def note_schedule(self, step: int, scheduled: int, observer: int, now: float) -> None:
        seen = self.schedule_seen.setdefault(step, scheduled)
        if seen != scheduled:
            self.trace.emit("schedule_divergence", now, node=observer, step=step, expected=seen, got=scheduled)

    def delay_for(self, step: int, node: Node, in_turn: int) -> DelaySample:
        override = self.config.faults.delay_overrides.get((step, node.id))
        params = self.params
        if override is not None:
            return DelaySample(float(override), 0.0, False)
        rng = np.random.default_rng([self.config.seed, 0xDE1A, step, node.id])
        beta = params.beta_override if params.beta_override is not None else node.beta.estimate(in_turn)
        sample = sample_delay(params.delay_mode, params.w, beta, rng)
        if sample.beta_clamped:
            self.trace.emit("beta_clamped", self.queue.now, node=node.id, step=step, beta=beta)
        self.trace.emit("delay_draw", self.queue.now, node=node.id, step=step, beta=round(float(beta), 6),
                        lo=round(sample.lo, 6), x=round(sample.x, 6))
        return sample

    def register_block(self, block: Block, x, now: float) -> None:
        self.blocks[block.id] = block
        self.trace.emit(
            "block", now, node=block.signer, step=block.step, kind=block.kind.value, block=block.id,
            parent=block.parent_id, txs=block.tx_count, fees=block.fee_total, size=block.size,
            uncles=[list(u) for u in block.uncle_refs], x=None if x is None else round(float(x), 6),
        )

    def note_reconstructed(self, block: Block, node: int, now: float) -> None:
        self._reconstructed[block.id] = self._reconstructed.get(block.id, 0) + 1

    def send_cbf(self, node: Node, target: int, step: int, now: float) -> None:
        snapshot = node.cbf.copy()
        delivery = self.net.send(node.id, target, snapshot.size_bytes, now)
        if delivery.delivered:
            self.queue.schedule(delivery.at, "cbf", target, CbfMsg(step, node.id, snapshot))
        else:
            self.trace.emit("undeliverable", now, node=node.id, dst=target, what="cbf")

    def broadcast_block(self, node: Node, block: Block, idx: np.ndarray, now: float) -> None:
        peers = [p for p in range(self.params.n) if p != node.id]
        mode = self.params.pcb_mode
        msgs = []
        if mode is PcbMode.FULL:
            msgs = [BlockMsg(block.id, node.id, block=block, nbytes=block.size) for _ in peers]
        elif mode is PcbMode.BCB:
            compact = pcb.baseline_bcb_encode(block)
            msgs = [BlockMsg(block.id, node.id, compact=compact, nbytes=compact.size) for _ in peers]
        else:
            salt = pcb.block_salt(block.step, block.signer)
            for peer in peers:
                held = node.peer_cbfs.get(peer)
                if held is not None and held[0] == block.step:
                    mask = _accel.cbf_query(held[1].counters, idx) if block.tx_count else np.zeros(0, bool)
                else:
                    # No filter from this peer for this step: send short ids only.
                    mask = np.ones(block.tx_count, dtype=bool)
                compact = pcb.encode_with_mask(block, mask, salt)
                msgs.append(BlockMsg(block.id, node.id, compact=compact, nbytes=compact.size))
        sizes = [m.nbytes for m in msgs]
        self.trace.emit(
            "broadcast", now, node=node.id, block=block.id, step=block.step,
            full_size=block.size, mean_size=round(float(np.mean(sizes)), 3),
        )
        for msg, delivery in zip(msgs, self.net.broadcast(node.id, peers, sizes, now)):
            if delivery.delivered:
                self.queue.schedule(delivery.at, "deliver", delivery.dst, msg)
            else:
                self.trace.emit("undeliverable", now, node=node.id, dst=delivery.dst, what="block", block=block.id)

    def resolve_missing(self, msg: BlockMsg, node_id: int) -> tuple[int, ...]:
        """Entry positions ``node_id`` cannot rebuild from its pool.

        The receiver looks short ids up among transactions it has seen (its
        pool plus contents of blocks it imported). Short ids are computed once
        per block over the whole shared table; when they are collision-free
        there, an entry resolves exactly when the receiver has seen its
        transaction. Otherwise the generic decoder runs on the seen set.
        """
        compact = msg.compact
        table = self.table
        key = (table.layout, len(table))
        cached = self._resolve_cache.get(msg.block_id)
        if cached is None or cached[0] != key:
            # Per-block work shared by every receiver: row lookup and a
            # collision check of the block's short ids against the table.
            block = self.blocks[msg.block_id]
            rows, ok = table.rows_of(block.txs) if len(block.txs) else (np.zeros(0, np.int64), np.zeros(0, bool))
            exact = True
            if len(block.txs):
                keys = pcb.short_ids(table.ids, compact.salt, compact.id_bits)
                uniq = np.unique(keys)
                exact = len(uniq) == len(keys)
                if exact and not ok.all():
                    stray = pcb.short_ids(block.txs.ids[~ok], compact.salt, compact.id_bits)
                    exact = not np.isin(stray, uniq).any()
            cached = (key, rows, ok, exact)
            self._resolve_cache[msg.block_id] = cached
        _, rows, ok, exact = cached
        short_pos = np.flatnonzero(compact.short_mask)
        if not exact:
            result = pcb.decode(compact, table.seen_batch(node_id))
            if result.complete:
                return ()
            return result.missing
        have = ok[short_pos].copy()
        have[have] = table.seen[node_id, rows[short_pos][have]]
        return tuple(short_pos[~have].tolist())

    def request_missing(self, node: Node, msg: BlockMsg, positions, now: float) -> None:
        req = MissingRequest(msg.block_id, node.id, tuple(positions))
        delivery = self.net.send(node.id, msg.sender, pcb.missing_request_size(req.positions), now)
        if delivery.delivered:
            self.queue.schedule(delivery.at, "missing_req", msg.sender, req)
        else:
            self.trace.emit("undeliverable", now, node=node.id, dst=msg.sender, what="missing_request")

    def _serve_missing(self, server: int, req: MissingRequest, now: float) -> None:
        block = self.blocks[req.block_id]
        txs = pcb.get_missing(block, req.positions)
        delivery = self.net.send(server, req.requester, pcb.missing_response_size(txs), now)
        if delivery.delivered:
            self.queue.schedule(
                delivery.at, "missing_resp", req.requester, MissingResponse(req.block_id, req.positions, txs)
            )
        else:
            self.trace.emit("undeliverable", now, node=server, dst=req.requester, what="missing_response")

    # ------------------------------------------------------------ loop

    def _step_boundary(self, step: int, now: float) -> None:
        self._resolve_cache.clear()
        if step % self.config.compact_every == 0:
            self.table.compact()
        rows = self.table.top_up(self.target, self.config.similarity, self.workload_rng)
        if len(rows):
            for node in self.nodes:
                node.on_new_rows(rows)

    def _dispatch(self, event) -> None:
        now = event.at
        kind = event.kind
        if kind == "deliver":
            self.nodes[event.node].on_block(event.data, now)
        elif kind == "verified":
            self.nodes[event.node].on_verified(event.data, now)
        elif kind == "timer":
            self.nodes[event.node].on_timer(event.data, now)
        elif kind == "cbf":
            self.nodes[event.node].on_cbf(event.data)
        elif kind == "missing_req":
            self._serve_missing(event.node, event.data, now)
        elif kind == "missing_resp":
            self.nodes[event.node].on_missing_response(event.data, now)
        elif kind == "step":
            self._step_boundary(event.data, now)
        else:  # pragma: no cover - defensive
            raise ValueError(f"unknown event kind {kind}")

    def best_head(self) -> bytes:
        best = None
        for node in self.nodes:
            ledger = node.ledger
            key = (-ledger.total_weight[ledger.head], ledger.head)
            if best is None or key < best[0]:
                best = (key, node)
        return best[1].ledger.head

    def run(self) -> SimResult:
        params = self.params
        cfg = self.config
        self.trace.emit(
            "run", 0.0, n=params.n, m=params.m, t_b=params.t_b, w=params.w, steps=cfg.steps, seed=cfg.seed,
            order=params.order_mode.value, delay=params.delay_mode.value, pcb=params.pcb_mode.value,
            cost=asdict(params.cost),
        )
        self._step_boundary(0, 0.0)
        for h in range(1, cfg.steps):
            self.queue.schedule(params.deadline(h), "step", -1, h)
        for node in self.nodes:
            node.head_changed(0.0)
        drain = cfg.drain if cfg.drain is not None else params.t_b + params.w + 2000.0
        self.queue.run_until(params.deadline(cfg.steps) + drain, self._dispatch)

        head = self.best_head()
        owner = next(n for n in self.nodes if head in n.ledger)
        chain = [b for b in reversed(list(owner.ledger.ancestors(head))) if b.step <= cfg.steps]
        self.trace.emit("commit", self.queue.now, blocks=[b.id for b in chain])
        betas = {node.id: node.beta.snapshot() for node in self.nodes}
        return SimResult(cfg, self.trace, chain, self.blocks, self.failing, betas)


def simulate(config: SimConfig) -> SimResult:
    return Simulation(config).run()


def trace_digest(trace: Trace) -> str:
    return hashlib.sha256(trace.dumps().encode()).hexdigest()
