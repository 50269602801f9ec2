"""Signer scheduling rules shared by block verification and the node state machine.

Nodes are indexed ``0 .. n-1``. A step ``h`` has one in-turn signer, a no-turn
set of ``floor((n+1)/2) - 1`` backup signers, and everyone else is forbidden.
Anyone who signed one of the last ``floor(n/2)`` blocks is barred from signing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


class OrderMode(str, enum.Enum):
    FIXED = "fixed"
    DIFFERENTIAL = "differential"


class DelayMode(str, enum.Enum):
    NAIVE = "naive"
    ACCURATE = "accurate"


class PcbMode(str, enum.Enum):
    FULL = "full"
    BCB = "bcb"
    PCB = "pcb"


class Role(str, enum.Enum):
    IN_TURN = "in_turn"
    NO_TURN = "no_turn"
    FORBIDDEN = "forbidden"


class InsufficientEligible(ValueError):
    """The authorized set is too small to fill the no-turn set."""


def default_w(n: int) -> float:
    return (n // 2 + 1) * 500.0


def recents_window(n: int) -> int:
    return n // 2


def no_turn_count(n: int) -> int:
    return (n + 1) // 2 - 1


@dataclass(frozen=True)
class CostModel:
    """Affine per-block CPU costs in ms: ``cost(m) = c0 + c1 * m``.

    Defaults keep verification, pool reset and assembly well below the
    broadcast cost of a full block on a 32 Mbit/s uplink.
    """

    v0: float = 20.0
    v1: float = 0.05
    r0: float = 10.0
    r1: float = 0.03
    a0: float = 20.0
    a1: float = 0.04

    def v(self, m: int) -> float:
        return self.v0 + self.v1 * m

    def r(self, m: int) -> float:
        return self.r0 + self.r1 * m

    def a(self, m: int) -> float:
        return self.a0 + self.a1 * m

    def local(self, m: int) -> float:
        """Verification + reset + assembly, everything except broadcast."""
        return self.v(m) + self.r(m) + self.a(m)


@dataclass(frozen=True)
class TaskTimings:
    b: float
    v: float
    r: float
    a: float

    @property
    def f(self) -> float:
        return self.b + self.v + self.r + self.a


@dataclass
class ProtocolParams:
    n: int
    m: int
    t_b: float = 3000.0
    w: float | None = None
    order_mode: OrderMode = OrderMode.FIXED
    delay_mode: DelayMode = DelayMode.NAIVE
    pcb_mode: PcbMode = PcbMode.FULL
    cost: CostModel = field(default_factory=CostModel)
    beta_alpha: float = 0.2
    beta_seed_first: bool = True
    # Forces beta for every no-turn draw; None means use the per-signer estimate.
    beta_override: float | None = None

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"need at least 2 consensus nodes, got n={self.n}")
        if self.m < 0:
            raise ValueError(f"block capacity must be >= 0, got m={self.m}")
        if self.t_b <= 0:
            raise ValueError(f"step duration must be positive, got t_b={self.t_b}")
        if self.w is None:
            self.w = default_w(self.n)
        self.order_mode = OrderMode(self.order_mode)
        self.delay_mode = DelayMode(self.delay_mode)
        self.pcb_mode = PcbMode(self.pcb_mode)

    @property
    def window(self) -> int:
        return recents_window(self.n)

    @property
    def no_turn_size(self) -> int:
        return no_turn_count(self.n)

    def deadline(self, step: int) -> float:
        return step * self.t_b


def in_turn_signer(
    step: int, order_mode: OrderMode | str, last_signer: int | None, n: int, recents: Sequence[int] = ()
) -> int:
    """Scheduled signer for ``step``.

    Fixed order uses ``(step + 1) mod n``. Differential order follows whoever
    signed the previous block: ``(last_signer + 1) mod n``, moving on to the
    next node while the candidate is in ``recents``. Without that skip, two
    failures a few steps apart can push the ring far enough that the
    successor is still recents-blocked. A genesis parent
    (``last_signer is None``) falls back to the fixed rule.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if OrderMode(order_mode) is OrderMode.FIXED or last_signer is None:
        return (step + 1) % n
    barred = set(recents)
    for offset in range(1, n + 1):
        node = (last_signer + offset) % n
        if node not in barred:
            return node
    return (last_signer + 1) % n


def no_turn_set(step: int, in_turn: int, recents: Sequence[int], n: int) -> tuple[int, ...]:
    """The ``floor((n+1)/2) - 1`` backup signers for a step.

    Eligible nodes are walked in ascending index order starting at
    ``(in_turn + 1) mod n``, skipping the in-turn node and recent signers.
    """
    want = no_turn_count(n)
    barred = set(recents)
    barred.add(in_turn)
    chosen = []
    for offset in range(1, n):
        node = (in_turn + offset) % n
        if node in barred:
            continue
        chosen.append(node)
        if len(chosen) == want:
            break
    if len(chosen) < want:
        raise InsufficientEligible(
            f"step {step}: only {len(chosen)} eligible no-turn signers, need {want} (n={n})"
        )
    return tuple(chosen)


def role_of(node: int, step: int, in_turn: int, recents: Sequence[int], n: int) -> Role:
    if node in recents:
        return Role.FORBIDDEN
    if node == in_turn:
        return Role.IN_TURN
    if node in no_turn_set(step, in_turn, recents, n):
        return Role.NO_TURN
    return Role.FORBIDDEN


class DelaySample(NamedTuple):
    x: float
    lo: float
    beta_clamped: bool


def sample_delay(
    delay_mode: DelayMode | str,
    w: float,
    beta_estimate: float,
    rng: np.random.Generator,
) -> DelaySample:
    """Draw a no-turn waiting time.

    Naive draws from ``U(0, w)``; accurate draws from ``U(beta, w)``. A beta
    at or above ``w`` is clamped to ``0.95 * w`` and flagged.
    """
    u = rng.random()
    if DelayMode(delay_mode) is DelayMode.NAIVE:
        return DelaySample(u * w, 0.0, False)
    beta = max(0.0, float(beta_estimate))
    clamped = False
    if beta >= w:
        beta = 0.95 * w
        clamped = True
    return DelaySample(beta + u * (w - beta), beta, clamped)


class BetaTracker:
    """Per-signer EWMA of observed broadcast + verification time.

    Before any observation of a signer the estimate is ``initial`` (0 by
    default, i.e. the naive range). With ``seed_first`` the first observation
    replaces the initial value outright instead of being blended into it.
    """

    def __init__(self, alpha: float = 0.2, initial: float = 0.0, seed_first: bool = True):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        self.alpha = alpha
        self.initial = initial
        self.seed_first = seed_first
        self._est: dict[int, float] = {}

    def estimate(self, signer: int) -> float:
        return self._est.get(signer, self.initial)

    def update(self, signer: int, observed_b_plus_v: float) -> float:
        if observed_b_plus_v < 0:
            raise ValueError("observed time must be non-negative")
        if signer not in self._est and self.seed_first:
            self._est[signer] = float(observed_b_plus_v)
            return self._est[signer]
        prev = self._est.get(signer, self.initial)
        new = prev + self.alpha * (observed_b_plus_v - prev)
        self._est[signer] = new
        return new

    def snapshot(self) -> dict[int, float]:
        return dict(self._est)


def update_beta(tracker: BetaTracker, signer: int, observed_b_plus_v: float) -> float:
    return tracker.update(signer, observed_b_plus_v)
