import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exclique.chain import Block, BlockKind, TxBatch, genesis
from exclique.rewards import active_generators, distribute, settle

from conftest import make_batch


def fee_batch(fees):
    fees = np.asarray(fees, dtype=np.int64)
    g = np.arange(len(fees))
    return TxBatch(make_batch(0, len(fees)).ids, 110, g, fees)


def build_chain(signers, fees, uncles=None):
    """Linear chain; ``fees[i]`` is the fee list of the block at step ``i + 1``."""
    chain = [genesis()]
    for i, (signer, f) in enumerate(zip(signers, fees)):
        refs = (uncles or {}).get(i + 1, ())
        chain.append(Block(i + 1, chain[-1].id, signer, BlockKind.IN_TURN, fee_batch(f), uncle_refs=refs))
    return chain


def test_window_is_previous_n_steps():
    chain = build_chain([1, 2, 3, 4, 0, 1], [[1]] * 6)
    assert active_generators(chain, 1, 5) == ()
    assert active_generators(chain, 3, 5) == (1, 2)
    assert set(active_generators(chain, 6, 5)) == {0, 1, 2, 3, 4}
    # Step 7 looks at steps 2..6 only.
    assert set(active_generators(chain, 7, 5)) == {0, 1, 2, 3, 4}
    assert set(active_generators(chain, 7, 3)) == {0, 1, 4}


def test_uncle_generators_share():
    chain = build_chain([1, 2, 3], [[1], [1], [1]], uncles={3: ((2, 4),)})
    assert set(active_generators(chain, 4, 5)) == {1, 2, 3, 4}


def test_empty_window_carries():
    chain = build_chain([1, 2], [[7], [5]])
    d = distribute(1, 7, chain, 5)
    assert d.empty_window and d.payouts == {} and d.carry == 7
    summary = settle(chain, 5)
    # Step 2 pays the 7 carried in plus its own 5 to node 1.
    assert summary.fair == {1: 12} and summary.carry == 0
    assert summary.empty_windows == 1


def test_integer_leftover_carried():
    chain = build_chain([0, 1, 2, 0], [[1], [1], [1], [10]])
    d = distribute(4, 10, chain, 5, carry=0)
    assert d.payouts == {0: 3, 1: 3, 2: 3} and d.carry == 1


def test_direct_scheme_pays_signer():
    chain = build_chain([1, 2, 1], [[3], [4], [5]])
    s = settle(chain, 5)
    assert s.direct == {1: 8, 2: 4}


@given(st.integers(3, 9), st.lists(st.tuples(st.integers(0, 8), st.lists(st.integers(1, 10), max_size=6)),
                                    min_size=1, max_size=40))
@settings(max_examples=80, deadline=None)
def test_conservation(n, blocks):
    signers = [s % n for s, _ in blocks]
    chain = build_chain(signers, [f for _, f in blocks])
    s = settle(chain, n)
    assert s.conserved
    assert sum(s.fair.values()) + s.carry == sum(sum(f) for _, f in blocks)
    assert 0 <= s.carry
    assert sum(s.direct.values()) == s.total_fees


def test_fair_spread_tighter_than_direct():
    # One node signs most blocks; fair payouts are shared across the window.
    rng = np.random.default_rng(1)
    signers = [0 if rng.random() < 0.6 else int(rng.integers(1, 5)) for _ in range(200)]
    fees = [[int(f) for f in rng.integers(1, 10, size=5)] for _ in range(200)]
    s = settle(build_chain(signers, fees), 5)
    assert s.spread("fair") < s.spread("direct")


def test_csv_columns():
    s = settle(build_chain([1, 2, 3], [[1], [2], [3]]), 4)
    rows = list(csv.reader(io.StringIO(s.to_csv())))
    assert rows[0] == ["node_id", "blocks_signed", "uncles", "reward_units", "direct_units"]
    assert len(rows) == 5
    assert sum(int(r[3]) for r in rows[1:]) + s.carry == 6


def test_settle_rejects_gaps():
    chain = build_chain([1, 2], [[1], [1]])

    with pytest.raises(ValueError):
        settle([chain[0], chain[2]], 5)
