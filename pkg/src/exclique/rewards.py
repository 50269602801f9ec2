"""Transaction-fee distribution.

The fair scheme pays the fees of each confirmed block at step ``h`` equally
to every node that generated a confirmed block, or an uncle referenced by
one, during steps ``h-n .. h-1``. Integer division leftovers are carried to
the next distribution so that payouts plus carry always equal fees paid in.
The direct scheme pays every fee to the block's signer.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .chain import Block, BlockKind


@dataclass
class Distribution:
    step: int
    fees: int
    active: tuple[int, ...]
    payouts: dict[int, int]
    carry: int
    empty_window: bool = False


def active_generators(chain: Sequence[Block], step: int, n: int) -> tuple[int, ...]:
    """Deduplicated generators (confirmed and uncle) over steps ``step-n .. step-1``.

    ``chain[i]`` must be the confirmed block at step ``i`` (genesis at 0).
    """
    seen: list[int] = []
    for s in range(step - n, step):
        if s < 1 or s >= len(chain):
            continue
        block = chain[s]
        for gen in [block.signer, *(signer for _, signer in block.uncle_refs)]:
            if gen >= 0 and gen not in seen:
                seen.append(gen)
    return tuple(seen)


def distribute(step: int, fees: int, chain: Sequence[Block], n: int, carry: int = 0) -> Distribution:
    """Split ``fees + carry`` evenly among the window's active generators.

    An empty window (chain start) pays nobody and carries everything forward.
    """
    active = active_generators(chain, step, n)
    pot = fees + carry
    if not active:
        return Distribution(step, fees, (), {}, pot, empty_window=True)
    share, rest = divmod(pot, len(active))
    return Distribution(step, fees, active, {node: share for node in active}, rest)


def direct_reward(block: Block) -> dict[int, int]:
    if block.kind is BlockKind.GENESIS:
        return {}
    return {block.signer: block.fee_total}


@dataclass
class RewardSummary:
    n: int
    fair: dict[int, int]
    direct: dict[int, int]
    carry: int
    total_fees: int
    empty_windows: int
    blocks_signed: dict[int, int]
    uncles: dict[int, int]
    distributions: list[Distribution] = field(default_factory=list, repr=False)

    @property
    def conserved(self) -> bool:
        return sum(self.fair.values()) + self.carry == self.total_fees

    def active_nodes(self) -> list[int]:
        """Nodes that produced at least one confirmed or uncle block."""
        return [i for i in range(self.n) if self.blocks_signed.get(i, 0) + self.uncles.get(i, 0) > 0]

    def spread(self, scheme: str) -> float:
        """max/min payout over active nodes (inf when some active node got nothing)."""
        pay = self.fair if scheme == "fair" else self.direct
        values = [pay.get(i, 0) for i in self.active_nodes()]
        if not values:
            return float("nan")
        lo = min(values)
        return float("inf") if lo == 0 else max(values) / lo

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["node_id", "blocks_signed", "uncles", "reward_units", "direct_units"])
        for i in range(self.n):
            writer.writerow([i, self.blocks_signed.get(i, 0), self.uncles.get(i, 0), self.fair.get(i, 0), self.direct.get(i, 0)])
        return buf.getvalue()


def settle(chain: Sequence[Block], n: int, keep_history: bool = False) -> RewardSummary:
    """Run both schemes over a committed chain (genesis first, one block per step)."""
    for i, block in enumerate(chain):
        if block.step != i:
            raise ValueError(f"chain position {i} holds step {block.step}")
    fair: Counter = Counter()
    direct: Counter = Counter()
    carry = 0
    total = 0
    empties = 0
    history = []
    uncle_counts: Counter = Counter()
    seen_uncles = set()
    for block in chain[1:]:
        fees = block.fee_total
        total += fees
        dist = distribute(block.step, fees, chain, n, carry)
        carry = dist.carry
        empties += dist.empty_window
        fair.update(dist.payouts)
        direct.update(direct_reward(block))
        for ref in block.uncle_refs:
            if ref not in seen_uncles:
                seen_uncles.add(ref)
                uncle_counts[ref[1]] += 1
        if keep_history:
            history.append(dist)
    signed = Counter(b.signer for b in chain[1:])
    return RewardSummary(n, dict(fair), dict(direct), carry, total, empties, dict(signed), dict(uncle_counts), history)
