"""Command-line entry point: ``exclique run|compare|probe``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import experiment
from .experiment import ConfigError, ExperimentConfig


def _base_config(args) -> ExperimentConfig:
    cfg = experiment.load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.algo is not None:
        overrides["algo"] = args.algo
    if args.nodes is not None:
        overrides["n"] = args.nodes
    if args.m is not None:
        overrides["m"] = "auto" if args.m == "auto" else int(args.m)
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    return experiment.with_overrides(cfg, **overrides) if overrides else cfg


def _point_dir(out: Path, point: dict) -> Path:
    if not point:
        return out
    name = "_".join(f"{k}={v}" for k, v in point.items()).replace("/", "-")
    return out / name


def cmd_run(args) -> int:
    cfg = _base_config(args)
    points = experiment.expand_sweeps(cfg, args.sweep or [])
    out = Path(args.out)
    if len(points) == 1:
        art = experiment.run(points[0][1], out)
        print(json.dumps(art.summary["report"] | {"m": art.summary["m"]}, indent=2, sort_keys=True))
        print(f"artifacts written to {out}")
        return 0
    if args.workers <= 1:
        summaries = [experiment.run(c, _point_dir(out, point)).summary for point, c in points]
    else:
        # Parallel workers return summaries only; traces stay in the workers.
        summaries = experiment.run_many([c for _, c in points], args.workers)
        for (point, _), summary in zip(points, summaries):
            target = _point_dir(out, point)
            target.mkdir(parents=True, exist_ok=True)
            (target / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    rows = []
    for (point, _), summary in zip(points, summaries):
        rep = summary["report"]
        rows.append({**point, "algo": summary["algo"], "m": summary["m"], "tps": rep["tps"], "p_f": rep["p_f"],
                     "p0": rep["p0"], "p1": rep["p1"], "p2": rep["p2"], "p3": rep["p3"]})
    cols = [*points[0][0].keys(), "algo", "m", "tps", "p_f", "p0", "p1", "p2", "p3"]
    print(experiment.format_table(rows, list(dict.fromkeys(cols))))
    return 0


def cmd_compare(args) -> int:
    cfg = _base_config(args)
    algos = args.algos.split(",")
    configs = [experiment.with_overrides(cfg, algo=a.strip()) for a in algos]
    result = experiment.compare(configs, args.workers)
    print(experiment.format_table(result["rows"]))
    for ratio in result["relative_to_first"]:
        print(
            f"{ratio['algo']} vs {result['rows'][0]['algo']}: tps x{ratio['tps_ratio']:.3f}, "
            f"block size x{ratio['block_size_ratio']:.3f}, broadcast x{ratio['broadcast_ratio']:.3f}"
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_probe(args) -> int:
    cfg = _base_config(args)
    if args.fit:
        m_star, fit = experiment.estimate_m_star(cfg)
        print(json.dumps({"m_star": m_star, "fit": asdict(fit)}, indent=2))
        return 0
    m = 1000 if cfg.m == "auto" else int(cfg.m)
    res = experiment.probe_broadcast(cfg, m)
    print(json.dumps({
        "m": res.m, "full_size": res.full_size, "mean_size": res.mean_size,
        "broadcast_time_ms": res.broadcast_time, "receivers_needing_extra_round": res.extra_rounds,
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exclique", description="PoA consensus simulator and experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (key = value text, or .json)")
        p.add_argument("--algo", choices=sorted(experiment.PRESETS))
        p.add_argument("--nodes", type=int, help="number of consensus nodes n")
        p.add_argument("--m", help="transactions per block, or 'auto' to use the estimated optimum")
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=1, help="parallel worker processes for sweeps")

    p_run = sub.add_parser("run", help="run one experiment (or a sweep) and write artifacts")
    common(p_run)
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.add_argument("--sweep", action="append", metavar="KEY=V1,V2,...", help="sweep a config key (repeatable)")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several algorithm presets on the same seed and tabulate")
    common(p_cmp)
    p_cmp.add_argument("--algos", default="clique,exclique")
    p_cmp.add_argument("--out")
    p_cmp.set_defaults(func=cmd_compare)

    p_probe = sub.add_parser("probe", help="time one block broadcast on an idle network")
    common(p_probe)
    p_probe.add_argument("--fit", action="store_true", help="fit broadcast time over m and report m*")
    p_probe.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
