"""TPS of clique vs exclique across network sizes, each at its own estimated m*.

Produced for inspection only; nothing here is asserted. The ratio is expected
to grow with n. Usage: ``python benchmarks/tps_sweep.py [--nodes 21,31,51,101]``.
"""

import argparse
import time

from exclique.experiment import ExperimentConfig, estimate_m_star, run


def sweep(nodes, steps: int, seed: int):
    for n in nodes:
        row = {"n": n}
        for algo in ("clique", "exclique"):
            cfg = ExperimentConfig(algo=algo, n=n, steps=steps, seed=seed)
            m_star, _ = estimate_m_star(cfg)
            report = run(ExperimentConfig(algo=algo, n=n, m=m_star, steps=steps, seed=seed)).report
            row[algo] = (m_star, report.tps, report.p_f)
        yield row


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", default="21,31,51,101")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    nodes = [int(x) for x in args.nodes.split(",")]

    print(f"{'n':>4}{'clique m*':>11}{'tps':>8}{'p_f':>7}{'exclique m*':>13}{'tps':>8}{'p_f':>7}{'ratio':>8}{'sec':>7}")
    for row in _timed(sweep(nodes, args.steps, args.seed)):
        (cm, ct, cf), (em, et, ef) = row["clique"], row["exclique"]
        print(f"{row['n']:>4}{cm:>11}{ct:>8.0f}{cf:>7.3f}{em:>13}{et:>8.0f}{ef:>7.3f}{et / ct:>8.2f}{row['sec']:>7.0f}")


def _timed(rows):
    t0 = time.perf_counter()
    for row in rows:
        row["sec"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        yield row


if __name__ == "__main__":
    main()
