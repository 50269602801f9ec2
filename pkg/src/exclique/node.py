"""Per-node protocol state machine.

A node reacts to three things: its head changing (work out its role for the
next step and arm the matching timer), a timer firing (seal a block), and a
block arriving (reconstruct, queue for verification, import). All side
effects go through the owning :class:`~exclique.simulation.Simulation`.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import pcb
from .cbf import CountingBloomFilter, UnderflowAttempt
from .chain import Block, BlockKind, Ledger, UpdateKind, verify_block
from .consensus import BetaTracker, PcbMode, Role, in_turn_signer, role_of


@dataclass
class BlockMsg:
    block_id: bytes
    sender: int
    block: Block | None = None  # set for full-block relay
    compact: pcb.CompactBlock | None = None
    nbytes: int = 0


@dataclass
class CbfMsg:
    step: int
    sender: int
    cbf: CountingBloomFilter


@dataclass
class MissingRequest:
    block_id: bytes
    requester: int
    positions: tuple[int, ...]


@dataclass
class MissingResponse:
    block_id: bytes
    positions: tuple[int, ...]
    txs: object


@dataclass
class _Pending:
    msg: BlockMsg
    delivered_at: float
    missing: tuple[int, ...] = ()
    rounds: int = 0


class Node:
    def __init__(self, sim, node_id: int):
        self.sim = sim
        self.id = node_id
        params = sim.params
        self.params = params
        self.ledger = Ledger(sim.genesis)
        self.cbf = CountingBloomFilter(sim.cbf_length, k=sim.config.cbf_k, c=sim.config.cbf_c, salt=sim.cbf_salt)
        self.peer_cbfs: dict[int, tuple[int, CountingBloomFilter]] = {}
        self.beta = BetaTracker(params.beta_alpha, seed_first=params.beta_seed_first)
        self.cpu_free_at = 0.0
        # Blocks whose transactions this node has executed. Side-chain blocks
        # that cannot become head are only header-checked until their branch wins.
        self.executed: set[bytes] = {sim.genesis.id}
        self.gen = 0
        self.known: set[bytes] = set()
        self.pending: dict[bytes, _Pending] = {}
        self.orphans: dict[bytes, list[Block]] = defaultdict(list)
        self.cbf_sent: set[tuple[int, int]] = set()
        self.role: Role | None = None
        self.role_step = 0

    # ------------------------------------------------------------ pool sync

    def _filter_add(self, rows: np.ndarray) -> None:
        if len(rows):
            self.cbf.add_indices(self.sim.table.cbf_idx[rows])

    def _filter_remove(self, rows: np.ndarray) -> None:
        if not len(rows):
            return
        try:
            self.cbf.remove_indices(self.sim.table.cbf_idx[rows])
        except UnderflowAttempt:
            self.sim.trace.emit("cbf_rebuild", self.sim.queue.now, node=self.id)
            self.cbf.rebuild_indices(self.sim.table.cbf_idx[self.sim.table.pool_rows(self.id)])

    def on_new_rows(self, rows: np.ndarray) -> None:
        mine = rows[self.sim.table.present[self.id, rows]]
        self._filter_add(mine)

    def _apply_update(self, update) -> None:
        table = self.sim.table
        for blk in update.abandoned:
            self._filter_add(table.reinject(self.id, blk.txs))
        for blk in update.adopted:
            self._filter_remove(table.remove(self.id, blk.txs))

    # ------------------------------------------------------------ roles

    def head_changed(self, now: float) -> None:
        self.gen += 1
        sim = self.sim
        params = self.params
        head = self.ledger.head_block
        step = head.step + 1
        if step > sim.last_step:
            return
        recents = self.ledger.recent_signers(head.id, params.window)
        scheduled = in_turn_signer(step, params.order_mode, recents.parent_signer, params.n, recents.signers)
        sim.note_schedule(step, scheduled, self.id, now)
        role = role_of(self.id, step, scheduled, recents.signers, params.n)
        self.role, self.role_step = role, step
        if scheduled == self.id and role is Role.FORBIDDEN:
            sim.trace.emit("in_turn_blocked", now, node=self.id, step=step)
        if params.pcb_mode is PcbMode.PCB and self.id != scheduled and (step, scheduled) not in self.cbf_sent:
            self.cbf_sent.add((step, scheduled))
            sim.send_cbf(self, scheduled, step, now)
        if role is Role.IN_TURN:
            if sim.in_turn_fails(step):
                sim.log_failure(step, self.id, now)
                return
            cost = params.cost
            deadline = params.deadline(step)
            full_ready = now + cost.r(params.m) + cost.a(params.m)
            full = full_ready <= deadline
            ready = full_ready if full else now + cost.r(0) + cost.a(0)
            sim.queue.schedule(max(deadline, ready), "timer", self.id, ("seal", self.gen, step, full, now, None))
        elif role is Role.NO_TURN:
            sample = sim.delay_for(step, self, scheduled)
            fire = max(now, params.deadline(step) + sample.x)
            sim.queue.schedule(fire, "timer", self.id, ("seal", self.gen, step, None, now, sample.x))

    def on_timer(self, data, now: float) -> None:
        _tag, gen, step, full, t0, x = data
        if gen != self.gen:
            return
        params = self.params
        if full is None:
            full = now >= t0 + params.cost.r(params.m) + params.cost.a(params.m)
            kind = BlockKind.NO_TURN
        else:
            kind = BlockKind.IN_TURN
        self.seal(step, kind, full, x, now)

    def seal(self, step: int, kind: BlockKind, full: bool, x, now: float) -> Block:
        sim = self.sim
        head = self.ledger.head_block
        rows = sim.table.pick(self.id, self.params.m if full else 0)
        txs = sim.table.batch(rows)
        uncles = self.ledger.uncle_candidates(head.id, step, self.params.n)
        block = Block(step, head.id, self.id, kind, txs, uncle_refs=uncles, created_at=now)
        sim.register_block(block, x, now)
        self.known.add(block.id)
        self.executed.add(block.id)
        sim.broadcast_block(self, block, sim.table.cbf_idx[rows], now)
        self._import(block, now)
        return block

    # ------------------------------------------------------------ receiving

    def on_cbf(self, msg: CbfMsg) -> None:
        prev = self.peer_cbfs.get(msg.sender)
        if prev is None or prev[0] <= msg.step:
            self.peer_cbfs[msg.sender] = (msg.step, msg.cbf)

    def on_block(self, msg: BlockMsg, now: float) -> None:
        if msg.block_id in self.known:
            return
        self.known.add(msg.block_id)
        if msg.compact is None:
            self._reconstructed(msg.block, now, now, 0)
            return
        missing = self.sim.resolve_missing(msg, self.id)
        if not missing:
            self._reconstructed(self.sim.blocks[msg.block_id], now, now, 0)
            return
        self.pending[msg.block_id] = _Pending(msg, now, missing)
        self.sim.request_missing(self, msg, missing, now)

    def on_missing_response(self, resp: MissingResponse, now: float) -> None:
        pend = self.pending.get(resp.block_id)
        if pend is None:
            return
        pend.rounds += 1
        if tuple(resp.positions) != pend.missing:
            return
        # Entries resolved on arrival stay held, so the response completes the block.
        del self.pending[resp.block_id]
        self._reconstructed(self.sim.blocks[resp.block_id], pend.delivered_at, now, pend.rounds)

    def _reconstructed(self, block: Block, delivered_at: float, now: float, rounds: int) -> None:
        self.sim.trace.emit(
            "reconstructed", now, node=self.id, block=block.id, step=block.step,
            delivered=round(delivered_at, 6), rounds=rounds,
        )
        self.sim.note_reconstructed(block, self.id, now)
        if block.parent_id not in self.ledger:
            self.orphans[block.parent_id].append(block)
            return
        self._queue_verify(block, now)

    def _would_lead(self, block: Block) -> bool:
        ledger = self.ledger
        weight = ledger.total_weight[block.parent_id] + block.weight
        head_weight = ledger.total_weight[ledger.head]
        return weight > head_weight or (weight == head_weight and block.id < ledger.head)

    def _queue_verify(self, block: Block, now: float) -> None:
        if not self._would_lead(block):
            self.sim.queue.schedule(now, "verified", self.id, (block, ()))
            return
        # Executing a block means executing every not-yet-executed ancestor first.
        to_run = [block]
        for anc in self.ledger.ancestors(block.parent_id):
            if anc.id in self.executed:
                break
            to_run.append(anc)
        cost = self.params.cost
        start = max(now, self.cpu_free_at)
        done = start + sum(cost.v(b.tx_count) for b in to_run)
        self.cpu_free_at = done
        self.sim.queue.schedule(done, "verified", self.id, (block, tuple(b.id for b in to_run)))

    def on_verified(self, data, now: float) -> None:
        block, executed = data
        self.executed.update(executed)
        self._check_and_import(block, now, full=bool(executed))

    def _check_and_import(self, block: Block, now: float, full: bool) -> None:
        recents = self.ledger.recent_signers(block.parent_id, self.params.window)
        result = verify_block(block, self.params, recents)
        if not result.ok:
            self.sim.trace.emit("rejected", now, node=self.id, block=block.id, reason=result.reason.value)
            return
        if full and block.kind is BlockKind.IN_TURN:
            self.beta.update(block.signer, now - block.created_at)
        self.sim.trace.emit("verified", now, node=self.id, block=block.id, step=block.step, executed=full)
        self._import(block, now)

    def _import(self, block: Block, now: float) -> None:
        update = self.ledger.append_candidate(block)
        if update.kind is UpdateKind.REJECTED:
            self.sim.trace.emit("rejected", now, node=self.id, block=block.id, reason=update.reason)
            return
        if update.deadlock_tie:
            self.sim.trace.emit("deadlock_tie", now, node=self.id, step=block.step, block=block.id)
        if update.kind is UpdateKind.REORGED:
            self.sim.trace.emit(
                "reorg", now, node=self.id, step=block.step,
                adopted=len(update.adopted), abandoned=len(update.abandoned),
            )
        self.sim.table.mark_seen(self.id, block.txs)
        self._apply_update(update)
        for child in self.orphans.pop(block.id, ()):
            self._queue_verify(child, now)
        if update.head_changed:
            self.head_changed(now)
