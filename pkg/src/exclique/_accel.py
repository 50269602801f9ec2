"""Hashing and counter kernels over uint64 word arrays.

Every kernel has a numba ``@njit`` body and a pure-numpy twin. The numba path
is used when numba imports cleanly and ``EXCLIQUE_DISABLE_NUMBA`` is unset (or
``0``). Both paths produce bit-identical results; ``tests/test_accel.py``
checks that.

Transaction ids are carried as ``(N, 4)`` uint64 arrays (32 bytes, little
endian words) so that batches can be hashed without touching Python objects.
"""

from __future__ import annotations

import os

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


def _env_disabled() -> bool:
    return os.environ.get("EXCLIQUE_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# ---------------------------------------------------------------- numpy path


def _np_mix64(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    x ^= x >> _S30
    x *= _M1
    x ^= x >> _S27
    x *= _M2
    x ^= x >> _S31
    return x


def _np_hash_words(words: np.ndarray, key: int) -> np.ndarray:
    h = np.full(words.shape[0], np.uint64(key), dtype=np.uint64)
    h += _GOLDEN
    h = _np_mix64(h)
    for lane in range(words.shape[1]):
        h = _np_mix64(h ^ words[:, lane])
    return h


def _np_txid_words(g: np.ndarray, seed: int) -> np.ndarray:
    g = g.astype(np.uint64)
    out = np.empty((g.shape[0], 4), dtype=np.uint64)
    base = g * np.uint64(4) + np.uint64(seed)
    for lane in range(4):
        out[:, lane] = _np_mix64(base + np.uint64((lane * int(_GOLDEN)) & 0xFFFFFFFFFFFFFFFF))
    return out


def _np_cbf_indices(words: np.ndarray, salt: int, k: int, length: int) -> np.ndarray:
    h1 = _np_hash_words(words, salt ^ 0x5851F42D4C957F2D)
    h2 = _np_hash_words(words, salt ^ 0x14057B7EF767814F) | np.uint64(1)
    steps = np.arange(k, dtype=np.uint64)
    combined = h1[:, None] + steps[None, :] * h2[:, None]
    return (combined % np.uint64(length)).astype(np.int64)


def _np_cbf_add(counters: np.ndarray, idx: np.ndarray, cmax: int) -> None:
    hits = np.bincount(idx.ravel(), minlength=counters.shape[0])
    touched = hits > 0
    new = counters[touched].astype(np.int64) + hits[touched]
    counters[touched] = np.minimum(new, cmax).astype(counters.dtype)


def _np_cbf_underflows(counters: np.ndarray, idx: np.ndarray, cmax: int) -> int:
    hits = np.bincount(idx.ravel(), minlength=counters.shape[0])
    cur = counters.astype(np.int64)
    bad = (hits > 0) & (cur < cmax) & (cur - hits < 0)
    return int(bad.sum())


def _np_cbf_remove(counters: np.ndarray, idx: np.ndarray, cmax: int) -> None:
    hits = np.bincount(idx.ravel(), minlength=counters.shape[0])
    touched = (hits > 0) & (counters < cmax)
    new = counters[touched].astype(np.int64) - hits[touched]
    counters[touched] = np.maximum(new, 0).astype(counters.dtype)


def _np_cbf_query(counters: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.all(counters[idx] > 0, axis=1)


# ---------------------------------------------------------------- numba path

_HAVE_NUMBA = False
if not _env_disabled():
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on environment
        _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _nb_mix(x):
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
        return x

    @njit(cache=True)
    def _nb_hash_words(words, key):
        n, lanes = words.shape
        out = np.empty(n, dtype=np.uint64)
        start = _nb_mix(np.uint64(key) + np.uint64(0x9E3779B97F4A7C15))
        for i in range(n):
            h = start
            for lane in range(lanes):
                h = _nb_mix(h ^ words[i, lane])
            out[i] = h
        return out

    @njit(cache=True)
    def _nb_txid_words(g, seed):
        n = g.shape[0]
        out = np.empty((n, 4), dtype=np.uint64)
        for i in range(n):
            base = np.uint64(g[i]) * np.uint64(4) + np.uint64(seed)
            for lane in range(4):
                out[i, lane] = _nb_mix(base + np.uint64(lane) * np.uint64(0x9E3779B97F4A7C15))
        return out

    @njit(cache=True)
    def _nb_cbf_indices(words, salt, k, length):
        h1 = _nb_hash_words(words, np.uint64(salt) ^ np.uint64(0x5851F42D4C957F2D))
        h2 = _nb_hash_words(words, np.uint64(salt) ^ np.uint64(0x14057B7EF767814F))
        n = words.shape[0]
        out = np.empty((n, k), dtype=np.int64)
        ulen = np.uint64(length)
        for i in range(n):
            a = h1[i]
            b = h2[i] | np.uint64(1)
            for j in range(k):
                out[i, j] = np.int64((a + np.uint64(j) * b) % ulen)
        return out

    @njit(cache=True)
    def _nb_cbf_add(counters, idx, cmax):
        n, k = idx.shape
        for i in range(n):
            for j in range(k):
                c = idx[i, j]
                if counters[c] < cmax:
                    counters[c] += 1

    @njit(cache=True)
    def _nb_cbf_underflows(counters, idx, cmax):
        # Dry run of the sequential decrement; the filter is left untouched.
        n, k = idx.shape
        scratch = counters.astype(np.int64)
        flagged = np.zeros(counters.shape[0], dtype=np.bool_)
        bad = 0
        for i in range(n):
            for j in range(k):
                c = idx[i, j]
                if scratch[c] >= cmax:
                    continue
                scratch[c] -= 1
                if scratch[c] < 0 and not flagged[c]:
                    flagged[c] = True
                    bad += 1
        return bad

    @njit(cache=True)
    def _nb_cbf_remove(counters, idx, cmax):
        n, k = idx.shape
        for i in range(n):
            for j in range(k):
                c = idx[i, j]
                if counters[c] < cmax and counters[c] > 0:
                    counters[c] -= 1

    @njit(cache=True)
    def _nb_cbf_query(counters, idx):
        n, k = idx.shape
        out = np.ones(n, dtype=np.bool_)
        for i in range(n):
            for j in range(k):
                if counters[idx[i, j]] == 0:
                    out[i] = False
                    break
        return out


USING_NUMBA = _HAVE_NUMBA


def _words(words: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(words, dtype=np.uint64).reshape(-1, 4)


def hash_words(words: np.ndarray, key: int) -> np.ndarray:
    """Keyed 64-bit hash of each row of an ``(N, 4)`` uint64 array."""
    words = _words(words)
    key = int(key) & 0xFFFFFFFFFFFFFFFF
    if USING_NUMBA:
        return _nb_hash_words(words, np.uint64(key))
    return _np_hash_words(words, key)


def txid_words(g: np.ndarray, seed: int = 0) -> np.ndarray:
    """Derive pseudo-random 32-byte transaction ids from integer sequence numbers."""
    g = np.ascontiguousarray(g, dtype=np.int64)
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    if USING_NUMBA:
        return _nb_txid_words(g, np.uint64(seed))
    return _np_txid_words(g, seed)


def cbf_indices(words: np.ndarray, salt: int, k: int, length: int) -> np.ndarray:
    """``(N, k)`` counter positions by double hashing ``h1 + j*h2 (mod L)``."""
    words = _words(words)
    salt = int(salt) & 0xFFFFFFFFFFFFFFFF
    if USING_NUMBA:
        return _nb_cbf_indices(words, np.uint64(salt), int(k), int(length))
    return _np_cbf_indices(words, salt, int(k), int(length))


def cbf_add(counters: np.ndarray, idx: np.ndarray, cmax: int) -> None:
    if idx.size == 0:
        return
    if USING_NUMBA:
        _nb_cbf_add(counters, idx, np.uint8(cmax))
    else:
        _np_cbf_add(counters, idx, cmax)


def cbf_underflows(counters: np.ndarray, idx: np.ndarray, cmax: int) -> int:
    """Number of distinct counters a removal of ``idx`` would drive below zero."""
    if idx.size == 0:
        return 0
    if USING_NUMBA:
        return int(_nb_cbf_underflows(counters, idx, cmax))
    return _np_cbf_underflows(counters, idx, cmax)


def cbf_remove(counters: np.ndarray, idx: np.ndarray, cmax: int) -> None:
    if idx.size == 0:
        return
    if USING_NUMBA:
        _nb_cbf_remove(counters, idx, np.uint8(cmax))
    else:
        _np_cbf_remove(counters, idx, cmax)


def cbf_query(counters: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if idx.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    if USING_NUMBA:
        return _nb_cbf_query(counters, idx)
    return _np_cbf_query(counters, idx)


def numpy_kernels() -> dict:
    """The fallback implementations, for equivalence tests and benchmarks."""
    return {
        "hash_words": lambda w, key: _np_hash_words(_words(w), int(key) & 0xFFFFFFFFFFFFFFFF),
        "txid_words": lambda g, seed=0: _np_txid_words(np.asarray(g, dtype=np.int64), int(seed)),
        "cbf_indices": lambda w, salt, k, L: _np_cbf_indices(_words(w), int(salt) & 0xFFFFFFFFFFFFFFFF, k, L),
        "cbf_add": _np_cbf_add,
        "cbf_remove": _np_cbf_remove,
        "cbf_underflows": _np_cbf_underflows,
        "cbf_query": _np_cbf_query,
    }
