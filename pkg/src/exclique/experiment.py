"""Experiment configuration, presets, runs, comparisons and broadcast probes."""

from __future__ import annotations

import copy
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import analytics
from .chain import Block, BlockKind
from .consensus import CostModel, DelayMode, OrderMode, PcbMode, ProtocolParams
from .netsim import NetworkConfig
from .rewards import RewardSummary, settle
from .simulation import FaultScript, SimConfig, SimResult, Simulation

PRESETS: dict[str, tuple[OrderMode, DelayMode, PcbMode]] = {
    "clique": (OrderMode.FIXED, DelayMode.NAIVE, PcbMode.FULL),
    "clique-bcb": (OrderMode.FIXED, DelayMode.NAIVE, PcbMode.BCB),
    "exclique": (OrderMode.DIFFERENTIAL, DelayMode.ACCURATE, PcbMode.PCB),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algo: str = "clique"
    n: int = 21
    t_b: float = 3000.0
    m: int | str = 1000
    steps: int = 300
    seed: int = 0
    w: float | None = None
    order_mode: str | None = None
    delay_mode: str | None = None
    pcb_mode: str | None = None
    similarity: float = 0.9
    tx_size: int = 110
    beta_alpha: float = 0.2
    beta_override: float | None = None
    reward_mode: str = "fair"
    warmup: int | None = None
    faults: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    cbf: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.algo not in PRESETS:
            raise ConfigError(f"algo must be one of {sorted(PRESETS)}, got {self.algo!r}")
        if not 2 <= int(self.n) <= 1000:
            raise ConfigError(f"n must be between 2 and 1000, got {self.n}")
        if self.m != "auto" and (not isinstance(self.m, (int, np.integer)) or self.m < 0):
            raise ConfigError(f"m must be a non-negative integer or 'auto', got {self.m!r}")
        if self.reward_mode not in ("fair", "direct"):
            raise ConfigError("reward_mode must be 'fair' or 'direct'")
        _check_keys("faults", self.faults, {f.name for f in fields(FaultScript)})
        _check_keys("network", self.network, {f.name for f in fields(NetworkConfig)})
        _check_keys("cost", self.cost, {f.name for f in fields(CostModel)})
        _check_keys("cbf", self.cbf, {"k", "c", "bits_per_item"})
        _check_keys("probe", self.probe, {"grid", "trials", "quantile"})

    @property
    def modes(self) -> tuple[OrderMode, DelayMode, PcbMode]:
        order, delay, pcb_mode = PRESETS[self.algo]
        return (
            OrderMode(self.order_mode) if self.order_mode else order,
            DelayMode(self.delay_mode) if self.delay_mode else delay,
            PcbMode(self.pcb_mode) if self.pcb_mode else pcb_mode,
        )

    def cost_model(self) -> CostModel:
        return CostModel(**self.cost)

    def protocol(self, m: int | None = None) -> ProtocolParams:
        order, delay, pcb_mode = self.modes
        m = self.m if m is None else m
        if m == "auto":
            raise ConfigError("resolve m='auto' with resolve_m() first")
        return ProtocolParams(
            n=int(self.n), m=int(m), t_b=float(self.t_b), w=self.w, order_mode=order, delay_mode=delay,
            pcb_mode=pcb_mode, cost=self.cost_model(), beta_alpha=self.beta_alpha, beta_override=self.beta_override,
        )

    def sim_config(self, m: int | None = None, steps: int | None = None) -> SimConfig:
        net = dict(self.network)
        for key in ("delay_range", "loss_range"):
            if key in net:
                net[key] = tuple(net[key])
        faults = dict(self.faults)
        if "fail_steps" in faults:
            faults["fail_steps"] = tuple(faults["fail_steps"])
        if "delay_overrides" in faults:
            faults["delay_overrides"] = {tuple(map(int, k.split(","))) if isinstance(k, str) else tuple(k): v
                                         for k, v in dict(faults["delay_overrides"]).items()}
        cbf = self.cbf
        return SimConfig(
            params=self.protocol(m), steps=int(self.steps if steps is None else steps), seed=int(self.seed),
            network=NetworkConfig(**net), similarity=self.similarity, tx_size=int(self.tx_size),
            cbf_k=int(cbf.get("k", 8)), cbf_c=int(cbf.get("c", 4)), cbf_bits_per_item=int(cbf.get("bits_per_item", 24)),
            faults=FaultScript(**faults),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _check_keys(section: str, mapping: dict, allowed: set) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{section} must be a table of settings")
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown {section} setting(s): {', '.join(unknown)}")


_TOP_KEYS = {f.name for f in fields(ExperimentConfig)}
_SECTIONS = {"faults", "network", "cost", "cbf", "probe"}


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; values are JSON when they parse as JSON, else strings.

    ``#`` starts a comment line. Dotted keys (``network.bandwidth``) fill
    nested sections. Errors name the offending line.
    """
    data: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        head, _, rest = key.partition(".")
        if head not in _TOP_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown setting {head!r}")
        if rest and head not in _SECTIONS:
            raise ConfigError(f"{source}:{lineno}: {head!r} has no sub-settings")
        if not value:
            raise ConfigError(f"{source}:{lineno}: missing value for {key!r}")
        parsed = _parse_value(value)
        try:
            _set_path(data, key, parsed)
            _validate_partial(head, data.get(head))
        except (ConfigError, TypeError, ValueError) as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return data


def _set_path(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key!r} conflicts with an earlier scalar value")
    node[parts[-1]] = value


_NUMERIC = {"n": int, "steps": int, "seed": int, "tx_size": int, "t_b": float, "similarity": float, "beta_alpha": float}


def _validate_partial(head: str, value) -> None:
    kind = _NUMERIC.get(head)
    if kind is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{head} must be a number, got {value!r}")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{head} must be an integer, got {value!r}")
    if head == "algo" and value not in PRESETS:
        raise ConfigError(f"algo must be one of {sorted(PRESETS)}, got {value!r}")
    if head == "m" and value != "auto" and (isinstance(value, bool) or not isinstance(value, int) or value < 0):
        raise ConfigError(f"m must be a non-negative integer or 'auto', got {value!r}")
    if head in _SECTIONS:
        if not isinstance(value, dict):
            raise ConfigError(f"{head} must be a table of settings")
        allowed = {
            "faults": {f.name for f in fields(FaultScript)},
            "network": {f.name for f in fields(NetworkConfig)},
            "cost": {f.name for f in fields(CostModel)},
            "cbf": {"k", "c", "bits_per_item"},
            "probe": {"grid", "trials", "quantile"},
        }[head]
        unknown = sorted(set(value) - allowed)
        if unknown:
            raise ConfigError(f"unknown {head} setting {unknown[0]!r}")


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    unknown = sorted(set(mapping) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown setting(s): {', '.join(unknown)}")
    data = dict(mapping)
    for key, kind in _NUMERIC.items():
        if key in data:
            data[key] = kind(data[key])
    return ExperimentConfig(**data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            mapping = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(mapping, dict):
            raise ConfigError(f"{path}:1: top level must be an object")
    else:
        mapping = parse_config_text(text, str(path))
    return config_from_mapping(mapping)


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Copy of ``cfg`` with top-level or dotted-key overrides applied."""
    data = copy.deepcopy(cfg.to_dict())
    for key, value in overrides.items():
        if value is None:
            continue
        _set_path(data, key.replace("__", "."), value)
    return config_from_mapping(data)


# ------------------------------------------------------------ probes / m*


@dataclass
class ProbeResult:
    m: int
    sender: int
    full_size: int
    mean_size: float
    broadcast_time: float
    per_receiver: list[float]
    extra_rounds: int


def probe_broadcast(cfg: ExperimentConfig, m: int, sender: int = 0, seed: int | None = None) -> ProbeResult:
    """Broadcast one block of ``m`` transactions on an idle network and time it.

    Receivers' filters are handed to the sender up front, so the probe times
    only block delivery and reconstruction (including any missing-transaction
    round), as the in-turn broadcast would be timed during a step.
    """
    probe_cfg = with_overrides(cfg, seed=cfg.seed if seed is None else seed)
    sim = Simulation(probe_cfg.sim_config(m=m, steps=1))
    sim.last_step = 0
    sim._step_boundary(0, 0.0)
    node = sim.nodes[sender]
    if sim.params.pcb_mode is PcbMode.PCB:
        for peer in sim.nodes:
            if peer.id != sender:
                node.peer_cbfs[peer.id] = (1, peer.cbf.copy())
    rows = sim.table.pick(sender, m)
    block = Block(1, sim.genesis.id, sender, BlockKind.IN_TURN, sim.table.batch(rows), created_at=0.0)
    sim.register_block(block, None, 0.0)
    sim.broadcast_block(node, block, sim.table.cbf_idx[rows], 0.0)
    _drain(sim)
    times = {}
    rounds = 0
    for rec in sim.trace.of_type("reconstructed"):
        if rec["block"] == block.id.hex():
            times[rec["node"]] = rec["t"]
            rounds += rec["rounds"] > 0
    bc = sim.trace.of_type("broadcast")[0]
    per = [times[i] for i in sorted(times)]
    return ProbeResult(m, sender, block.size, bc["mean_size"], max(per) if per else 0.0, per, rounds)


def _drain(sim: Simulation) -> None:
    while len(sim.queue):
        sim._dispatch(sim.queue.pop())


@dataclass
class BroadcastFit:
    """Affine fit ``b(m) = b0 + b1 * m`` of a per-receiver delivery quantile."""

    b0: float
    b1: float
    quantile: float
    points: list[tuple[int, float]]

    def __call__(self, m: int) -> float:
        return max(0.0, self.b0 + self.b1 * m)


def fit_broadcast(cfg: ExperimentConfig, grid: Sequence[int] | None = None, trials: int | None = None,
                  quantile: float | None = None) -> BroadcastFit:
    grid = list(grid or cfg.probe.get("grid", [500, 2000, 6000]))
    trials = int(trials or cfg.probe.get("trials", 3))
    quantile = float(quantile if quantile is not None else cfg.probe.get("quantile", 0.9))
    points = []
    for m in grid:
        samples = []
        for t in range(trials):
            res = probe_broadcast(cfg, m, sender=(t * 7) % int(cfg.n), seed=int(cfg.seed) * 1000 + t)
            samples.extend(res.per_receiver)
        points.append((int(m), float(np.quantile(samples, quantile))))
    ms = np.array([p[0] for p in points], dtype=float)
    bs = np.array([p[1] for p in points], dtype=float)
    b1, b0 = np.polyfit(ms, bs, 1) if len(points) > 1 else (0.0, bs[0])
    return BroadcastFit(float(b0), max(0.0, float(b1)), quantile, points)


def estimate_m_star(cfg: ExperimentConfig, fit: BroadcastFit | None = None) -> tuple[int, BroadcastFit]:
    """Largest m whose estimated step cost b(m) + v(m) + r(m) + a(m) fits in ``t_b``."""
    fit = fit or fit_broadcast(cfg)
    cost = cfg.cost_model()
    m_star = analytics.find_m_star(lambda m: fit(m) + cost.local(m), float(cfg.t_b))
    return m_star, fit


def resolve_m(cfg: ExperimentConfig) -> tuple[ExperimentConfig, dict]:
    if cfg.m != "auto":
        return cfg, {}
    m_star, fit = estimate_m_star(cfg)
    return with_overrides(cfg, m=int(m_star)), {"m_star": m_star, "broadcast_fit": asdict(fit)}


# -------------------------------------------------------------------- run


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    result: SimResult
    steps: list
    report: analytics.AnalyticsReport
    rewards: RewardSummary
    summary: dict

    def trace_text(self) -> str:
        return self.result.trace.dumps()

    def steps_csv(self) -> str:
        return analytics.steps_csv(self.steps)

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True, default=analytics._json_default)

    def rewards_csv(self) -> str:
        return self.rewards.to_csv()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.ndjson").write_text(self.trace_text(), encoding="utf-8")
        (out / "steps.csv").write_text(self.steps_csv(), encoding="utf-8")
        (out / "summary.json").write_text(self.summary_json(), encoding="utf-8")
        (out / "rewards.csv").write_text(self.rewards_csv(), encoding="utf-8")
        return out


def run(cfg: ExperimentConfig, out_dir=None) -> RunArtifacts:
    cfg, m_info = resolve_m(cfg)
    result = Simulation(cfg.sim_config()).run()
    steps, report = analytics.classify_trace(result.trace.records, warmup=cfg.warmup)
    rewards = settle(result.committed, int(cfg.n))
    order, delay, pcb_mode = cfg.modes
    summary = {
        "note": f"rates and TPS exclude the first {report.warmup} steps as warm-up",
        "algo": cfg.algo,
        "order_mode": order.value,
        "delay_mode": delay.value,
        "pcb_mode": pcb_mode.value,
        "n": cfg.n,
        "m": cfg.m,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "report": report.to_dict(),
        "rewards": {
            "scheme": cfg.reward_mode,
            "total_fees": rewards.total_fees,
            "carry": rewards.carry,
            "conserved": rewards.conserved,
            "fair_spread": rewards.spread("fair"),
            "direct_spread": rewards.spread("direct"),
            "empty_windows": rewards.empty_windows,
        },
        **m_info,
    }
    summary = json.loads(json.dumps(summary, default=analytics._json_default, allow_nan=True))
    art = RunArtifacts(cfg, result, steps, report, rewards, summary)
    if out_dir is not None:
        art.write(out_dir)
    return art


def _run_summary(cfg: ExperimentConfig) -> dict:
    return run(cfg).summary


# ---------------------------------------------------------------- sweeps


def parse_sweep(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise ConfigError(f"sweep must look like KEY=V1,V2,..., got {text!r}")
    key, values = text.split("=", 1)
    key = key.strip()
    head = key.split(".")[0]
    if head not in _TOP_KEYS:
        raise ConfigError(f"unknown sweep key {key!r}")
    return key, [_parse_value(v) for v in values.split(",") if v.strip()]


def expand_sweeps(cfg: ExperimentConfig, sweeps: Iterable[str]) -> list[tuple[dict, ExperimentConfig]]:
    parsed = [parse_sweep(s) for s in sweeps]
    if not parsed:
        return [({}, cfg)]
    keys = [k for k, _ in parsed]
    out = []
    for combo in itertools.product(*(vals for _, vals in parsed)):
        point = dict(zip(keys, combo))
        out.append((point, with_overrides(cfg, **point)))
    return out


def run_many(configs: Sequence[ExperimentConfig], workers: int = 1) -> list[dict]:
    if workers <= 1 or len(configs) <= 1:
        return [_run_summary(c) for c in configs]
    with ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or 1)) as pool:
        return list(pool.map(_run_summary, configs))


COMPARE_COLUMNS = (
    "algo", "n", "m", "tps", "p_f", "p0", "p1", "p2", "p3", "mean_block_size", "mean_broadcast", "fair_spread",
    "direct_spread",
)


def compare(configs: Sequence[ExperimentConfig], workers: int = 1) -> dict:
    """Run each config and tabulate throughput, forks, block size/broadcast time and reward spread."""
    summaries = run_many(configs, workers)
    rows = []
    for s in summaries:
        rep = s["report"]
        rows.append({
            "algo": s["algo"], "n": s["n"], "m": s["m"], "tps": rep["tps"], "p_f": rep["p_f"],
            "p0": rep["p0"], "p1": rep["p1"], "p2": rep["p2"], "p3": rep["p3"],
            "mean_block_size": rep["mean_block_size"], "mean_broadcast": rep["mean_broadcast"],
            "fair_spread": s["rewards"]["fair_spread"], "direct_spread": s["rewards"]["direct_spread"],
        })
    base = rows[0] if rows else None
    ratios = []
    for row in rows[1:]:
        ratios.append({
            "algo": row["algo"],
            "tps_ratio": row["tps"] / base["tps"] if base["tps"] else float("nan"),
            "block_size_ratio": row["mean_block_size"] / base["mean_block_size"] if base["mean_block_size"] else float("nan"),
            "broadcast_ratio": row["mean_broadcast"] / base["mean_broadcast"] if base["mean_broadcast"] else float("nan"),
        })
    return {"rows": rows, "relative_to_first": ratios}


def format_table(rows: Sequence[dict], columns: Sequence[str] = COMPARE_COLUMNS) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
