"""Closed-form throughput and fork models, and classification of simulated runs.

Every committed step falls into one of four cases:

* ``normal``: a non-empty in-turn block following an in-turn block (or genesis);
* ``exc1``: a no-turn block following an in-turn block;
* ``exc2``: an in-turn block following a no-turn block, or an empty in-turn block;
* ``exc3``: a no-turn block following a no-turn block.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .consensus import CostModel, no_turn_count


class NoFeasibleM(ValueError):
    """Even an empty block does not fit within one step."""


class MalformedTrace(ValueError):
    pass


# ------------------------------------------------------------------ models


def lambda0(m_star: float, t_b: float) -> float:
    """Normal-case throughput in tx/s; ``t_b`` in ms."""
    if m_star < 0 or t_b <= 0:
        raise ValueError("need m_star >= 0 and t_b > 0")
    return m_star / (t_b / 1000.0)


def delta1(n: int, w: float) -> float:
    """Expected minimum of the no-turn delays: ``w / floor((n+1)/2)``."""
    return w / ((n + 1) // 2)


def lambda1(m_star: float, t_b: float, d1: float) -> float:
    return m_star / ((t_b + d1) / 1000.0)


def lambda2(*_args) -> float:
    return 0.0


def min_delay_samples(n: int, w: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Winning no-turn delay: minimum of ``floor((n+1)/2) - 1`` uniforms on (0, w)."""
    k = no_turn_count(n)
    if k == 0 or w == 0:
        return np.zeros(size)
    return rng.uniform(0.0, w, size=(size, k)).min(axis=1)


def conditional_gap(n: int, w: float, samples: int = 1_000_000, seed: int = 20240521) -> float:
    """Monte-Carlo ``E[d_h - d_{h-1} | d_h >= d_{h-1}]`` for consecutive winning delays."""
    if w == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    a = min_delay_samples(n, w, samples, rng)
    b = min_delay_samples(n, w, samples, rng)
    gap = a - b
    keep = gap >= 0
    return float(gap[keep].mean())


def lambda3(m_star: float, t_b: float, n: int, w: float, samples: int = 1_000_000, seed: int = 20240521) -> float:
    return 0.5 * m_star / ((t_b + conditional_gap(n, w, samples, seed)) / 1000.0)


def expected_tps(p: Sequence[float], lam0: float, d1: float, cond_exp: float, t_b: float) -> float:
    """Case-weighted throughput; ``p = (p0, p1, p2, p3)``."""
    p0, p1, _p2, p3 = p
    return p0 * lam0 + p1 * lam0 / (1.0 + d1 / t_b) + 0.5 * p3 * lam0 / (1.0 + cond_exp / t_b)


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def fork_prob_single(b: float, v: float, w: float) -> float:
    """Chance one no-turn node fires before the in-turn block is verified."""
    if b + v < 0 or w <= 0:
        raise ValueError("need b + v >= 0 and w > 0")
    return _clamp((b + v) / w)


def fork_prob(p_s: float, n: int) -> float:
    return _clamp(1.0 - (1.0 - _clamp(p_s)) ** no_turn_count(n))


def fork_prob_accurate(b: float, v: float, beta: float, w: float, n: int) -> float:
    if w <= 0:
        raise ValueError("w must be positive")
    return _clamp(1.0 - (1.0 - _clamp((b + v - beta) / w)) ** no_turn_count(n))


def find_m_star(f: Callable[[int], float] | CostModel, t_b: float, m_max: int = 10**8) -> int:
    """Largest ``m`` with ``f(m) <= t_b`` for nondecreasing ``f``.

    Doubles an upper bound until it is infeasible, then bisects.
    """
    if isinstance(f, CostModel):
        f = f.local
    if f(0) > t_b:
        raise NoFeasibleM(f"f(0) = {f(0):.3f} ms exceeds t_b = {t_b} ms")
    lo, hi = 0, 1
    while f(hi) <= t_b:
        lo = hi
        hi *= 2
        if hi > m_max:
            return m_max if f(m_max) <= t_b else _bisect(f, t_b, lo, m_max)
    return _bisect(f, t_b, lo, hi)


def _bisect(f, t_b: float, lo: int, hi: int) -> int:
    # invariant: f(lo) <= t_b < f(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if f(mid) <= t_b:
            lo = mid
        else:
            hi = mid
    return lo


# --------------------------------------------------------- classification


class Case(str, enum.Enum):
    NORMAL = "normal"
    EXC1 = "exc1"
    EXC2 = "exc2"
    EXC3 = "exc3"


def classify(kind: str, tx_count: int, prev_kind: str) -> Case:
    prev_no_turn = prev_kind == "no_turn"
    if kind == "no_turn":
        return Case.EXC3 if prev_no_turn else Case.EXC1
    if prev_no_turn or tx_count == 0:
        return Case.EXC2
    return Case.NORMAL


@dataclass
class StepRecord:
    step: int
    kind: str
    case: Case
    tx_count: int
    x: float | None
    b: float
    v: float
    r: float
    a: float
    fork: bool
    signer: int
    created_at: float
    fees: int
    size: int
    # Mean bytes sent per peer; below ``size`` for compact encodings.
    wire_size: float = 0.0

    @property
    def committed_kind(self) -> str:
        if self.kind == "in_turn" and self.tx_count == 0:
            return "empty"
        return self.kind

    @property
    def f(self) -> float:
        return self.b + self.v + self.r + self.a


@dataclass
class AnalyticsReport:
    steps: int
    warmup: int
    p0: float
    p1: float
    p2: float
    p3: float
    p_f: float
    tps: float
    lambda0: float
    lambda1: float
    lambda2: float
    lambda3: float
    lambda_model: float
    delta1: float
    cond_gap: float
    m_star: int
    mean_block_size: float
    mean_full_size: float
    mean_broadcast: float
    mean_f: float
    empty_rate: float
    deadlock_ties: int
    in_turn_failures: int
    model_vs_measured: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _parse(records: Iterable[dict]):
    run = None
    blocks: dict[str, dict] = {}
    recon: dict[str, float] = {}
    wire: dict[str, float] = {}
    commit = None
    ties = set()
    failures = 0
    for rec in records:
        kind = rec.get("type")
        if kind == "run":
            run = rec
        elif kind == "block":
            blocks[rec["block"]] = rec
        elif kind == "reconstructed":
            prev = recon.get(rec["block"])
            if prev is None or rec["t"] > prev:
                recon[rec["block"]] = rec["t"]
        elif kind == "broadcast":
            wire[rec["block"]] = rec["mean_size"]
        elif kind == "commit":
            commit = rec
        elif kind == "deadlock_tie":
            ties.add(rec["step"])
        elif kind == "in_turn_failed":
            failures += 1
    if run is None or commit is None:
        raise MalformedTrace("trace needs a run header and a commit record")
    return run, blocks, recon, wire, commit, ties, failures


def classify_trace(records: Iterable[dict], warmup: int | None = None, gap_samples: int = 200_000):
    """Per-step records for the committed chain and the summary report.

    The first ``warmup`` steps (default ``n``) are excluded from rates and
    throughput but still appear in the step list.
    """
    run, blocks, recon, wire, commit, ties, failures = _parse(records)
    n, m, t_b, w = run["n"], run["m"], run["t_b"], run["w"]
    cost = CostModel(**run["cost"]) if "cost" in run else CostModel()
    warmup = n if warmup is None else warmup
    per_step: dict[int, int] = {}
    for rec in blocks.values():
        per_step[rec["step"]] = per_step.get(rec["step"], 0) + 1

    chain = commit["blocks"]
    steps: list[StepRecord] = []
    prev_kind = "genesis"
    for bid in chain[1:]:
        rec = blocks.get(bid)
        if rec is None:
            raise MalformedTrace(f"committed block {bid[:12]} has no block record")
        txs = rec["txs"]
        b = recon.get(bid, rec["t"]) - rec["t"]
        steps.append(
            StepRecord(
                step=rec["step"], kind=rec["kind"], case=classify(rec["kind"], txs, prev_kind),
                tx_count=txs, x=rec.get("x"), b=b, v=cost.v(txs), r=cost.r(txs), a=cost.a(txs),
                fork=per_step.get(rec["step"], 0) >= 2, signer=rec["node"], created_at=rec["t"],
                fees=rec.get("fees", 0), size=rec["size"], wire_size=wire.get(bid, rec["size"]),
            )
        )
        prev_kind = rec["kind"]

    scored = [s for s in steps if s.step > warmup]
    count = len(scored)
    rates = {c: 0.0 for c in Case}
    if count:
        for s in scored:
            rates[s.case] += 1
        rates = {c: v / count for c, v in rates.items()}
    p_f = sum(s.fork for s in scored) / count if count else 0.0
    tps = 0.0
    base = [s for s in steps if s.step == warmup]
    start_t = base[0].created_at if base else 0.0
    if scored and scored[-1].created_at > start_t:
        tps = sum(s.tx_count for s in scored) / ((scored[-1].created_at - start_t) / 1000.0)
    d1 = delta1(n, w)
    gap = conditional_gap(n, w, samples=gap_samples)
    lam0 = lambda0(m, t_b)
    p = (rates[Case.NORMAL], rates[Case.EXC1], rates[Case.EXC2], rates[Case.EXC3])
    model = expected_tps(p, lam0, d1, gap, t_b)
    mean = lambda xs: float(np.mean(xs)) if len(xs) else 0.0
    report = AnalyticsReport(
        steps=len(steps), warmup=warmup, p0=p[0], p1=p[1], p2=p[2], p3=p[3], p_f=p_f, tps=tps,
        lambda0=lam0, lambda1=lambda1(m, t_b, d1), lambda2=0.0, lambda3=0.5 * m / ((t_b + gap) / 1000.0),
        lambda_model=model, delta1=d1, cond_gap=gap, m_star=m,
        mean_block_size=mean([s.wire_size for s in scored]),
        mean_full_size=mean([s.size for s in scored]),
        mean_broadcast=mean([s.b for s in scored if s.kind == "in_turn"]),
        mean_f=mean([s.f for s in scored if s.kind == "in_turn"]),
        empty_rate=mean([s.tx_count == 0 for s in scored]),
        deadlock_ties=len(ties), in_turn_failures=failures,
        model_vs_measured={"tps_model": model, "tps_measured": tps, "tps_delta": model - tps},
    )
    return steps, report


STEP_COLUMNS = ("step", "kind", "case", "tx_count", "x", "b", "v", "r", "a", "fork")


def steps_csv(steps: Sequence[StepRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STEP_COLUMNS)
    for s in steps:
        writer.writerow([
            s.step, s.committed_kind, s.case.value, s.tx_count,
            "" if s.x is None else f"{s.x:.3f}",
            f"{s.b:.3f}", f"{s.v:.3f}", f"{s.r:.3f}", f"{s.a:.3f}", int(s.fork),
        ])
    return buf.getvalue()


def report_json(report: AnalyticsReport, extra: dict | None = None) -> str:
    data = report.to_dict()
    if extra:
        data.update(extra)
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default)


def _json_default(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def fork_rate_over(steps: Sequence[StepRecord], predicate: Callable[[StepRecord], bool] | None = None) -> float:
    chosen = [s for s in steps if predicate is None or predicate(s)]
    return sum(s.fork for s in chosen) / len(chosen) if chosen else math.nan
