"""Time the numba kernels in ``exclique._accel`` against their numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py [--n 100000] [--repeat 5]``.
Each pair is checked for identical output before it is timed. With
``EXCLIQUE_DISABLE_NUMBA=1`` both columns use the fallback.
"""

import argparse
import timeit

import numpy as np

from exclique import _accel


def _inputs(n: int, k: int, length: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    g = np.arange(n, dtype=np.int64)
    words = _accel.txid_words(g, seed=seed)
    idx = _accel.cbf_indices(words, 0x5EED, k, length)
    counters = np.zeros(length, dtype=np.uint8)
    _accel.cbf_add(counters, idx, 15)
    probe = _accel.cbf_indices(_accel.txid_words(g + n, seed=seed), 0x5EED, k, length)
    return rng, g, words, idx, counters, probe


def cases(n: int, k: int = 8):
    length = 24 * n
    _, g, words, idx, counters, probe = _inputs(n, k, length)
    fb = _accel.numpy_kernels()
    cmax = 15

    def add_remove(add, remove):
        def run():
            c = np.zeros(length, dtype=np.uint8)
            add(c, idx, cmax)
            remove(c, idx, cmax)
            return c
        return run

    return {
        "txid_words": (lambda: _accel.txid_words(g, 3), lambda: fb["txid_words"](g, 3)),
        "hash_words": (lambda: _accel.hash_words(words, 99), lambda: fb["hash_words"](words, 99)),
        "cbf_indices": (
            lambda: _accel.cbf_indices(words, 7, k, length),
            lambda: fb["cbf_indices"](words, 7, k, length),
        ),
        "cbf_add+remove": (
            add_remove(_accel.cbf_add, _accel.cbf_remove),
            add_remove(fb["cbf_add"], fb["cbf_remove"]),
        ),
        "cbf_query": (
            lambda: _accel.cbf_query(counters, probe),
            lambda: fb["cbf_query"](counters, probe),
        ),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000, help="transactions per call")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    print(f"numba active: {_accel.USING_NUMBA}  n={args.n}")
    print(f"{'kernel':<16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, (fast, slow) in cases(args.n).items():
        assert np.array_equal(fast(), slow()), name
        t_fast = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{t_fast:>12.3f}{t_slow:>12.3f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
