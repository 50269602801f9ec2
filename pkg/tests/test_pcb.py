
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exclique import pcb
from exclique.cbf import CountingBloomFilter
from exclique.chain import Block, BlockKind, TxBatch, genesis

from conftest import make_batch


def make_block(txs: TxBatch, step=1, signer=2) -> Block:
    return Block(step, genesis().id, signer, BlockKind.IN_TURN, txs, created_at=0.0)


def filter_of(txs: TxBatch, length=None) -> CountingBloomFilter:
    f = CountingBloomFilter(length or max(64, 16 * len(txs)), salt=9)
    if len(txs):
        f.add(txs.ids)
    return f


def test_short_id_deterministic_and_salted():
    tx = make_batch(0, 1)[0].id
    assert pcb.short_id(tx, 1) == pcb.short_id(tx, 1)
    assert len(pcb.short_id(tx, 1)) == 6
    assert pcb.short_id(tx, 1) != pcb.short_id(tx, 2)


def test_no_collisions_among_ten_thousand():
    ids = make_batch(0, 10_000, seed=4).ids
    values = pcb.short_ids(ids, pcb.block_salt(3, 1))
    assert len(np.unique(values)) == 10_000


def test_all_in_filter_gives_all_short_ids():
    txs = make_batch(0, 200)
    block = make_block(txs)
    c = pcb.encode(block, filter_of(txs))
    assert c.short_count == 200
    assert c.size == c.header_size + 6 * 200
    assert c.header_size == block.header_size + 9 + 25


def test_empty_filter_gives_full_block():
    txs = make_batch(0, 100)
    block = make_block(txs)
    c = pcb.encode(block, CountingBloomFilter(512))
    assert c.short_count == 0
    assert c.size - (9 + 13) == block.size
    res = pcb.decode(c, TxBatch.empty())
    assert res.complete and res.block.serialize() == block.serialize()


def test_similarity_point_ratio():
    # 90% of a 1000-tx block held by the receiver, 110-byte transactions.
    txs = make_batch(0, 1000)
    block = make_block(txs)
    rng = np.random.default_rng(0)
    held = txs[rng.random(1000) < 0.9]
    c = pcb.encode(block, filter_of(held, length=8 * 1000))
    expected = block.header_size + 6 * 900 + 110 * 100
    assert block.size / c.size > 5
    assert abs(c.size - expected) < 0.1 * expected


def test_evicted_tx_reported_missing_and_completed():
    txs = make_batch(0, 30)
    block = make_block(txs)
    c = pcb.encode(block, filter_of(txs))
    pool = txs[np.arange(30) != 7]
    res = pcb.decode(c, pool)
    assert not res.complete and res.missing == (7,)
    fetched = pcb.get_missing(block, res.missing)
    rebuilt = pcb.complete_with(c, pool, fetched, res.missing)
    assert rebuilt.serialize() == block.serialize()


def test_bcb_encode_and_missing_fraction_payload():
    txs = make_batch(0, 400)
    block = make_block(txs)
    c = pcb.baseline_bcb_encode(block)
    assert c.short_count == 400
    assert pcb.decode(c, txs).complete
    keep = np.ones(400, bool)
    keep[::10] = False
    res = pcb.decode(c, txs[keep])
    assert len(res.missing) == 40
    resp = pcb.missing_response_size(pcb.get_missing(block, res.missing))
    assert resp == 34 + 40 * 110


def test_collision_in_narrow_ids_is_ambiguous():
    salt = 77
    pool = make_batch(0, 3000)
    narrow = pcb.short_ids(pool.ids, salt, bits=16)
    seen = {}
    pair = None
    for i, v in enumerate(narrow.tolist()):
        if v in seen:
            pair = (seen[v], i)
            break
        seen[v] = i
    assert pair is not None
    block = make_block(pool[[pair[0]]])
    c = pcb.encode(block, filter_of(pool), salt=salt, bits=16)
    res = pcb.decode(c, pool)
    assert not res.complete
    assert res.ambiguous == 1 and res.missing == (0,)


def test_wrong_pool_match_triggers_root_mismatch():
    # A 1-bit short id almost surely resolves to the wrong transaction.
    block = make_block(make_batch(0, 1))
    c = pcb.encode_with_mask(block, np.ones(1, bool), salt=5, bits=1)
    decoys = make_batch(100, 40)
    values = pcb.short_ids(decoys.ids, 5, bits=1)
    target = int(c.short_values[0])
    decoy = decoys[np.flatnonzero(values == target)[:1]]
    res = pcb.decode(c, decoy)
    assert not res.complete and res.root_mismatch and res.missing == (0,)


@given(st.integers(0, 10**6), st.integers(0, 120), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_round_trip_over_random_pools(start, m, seed):
    rng = np.random.default_rng(seed)
    txs = make_batch(start, m)
    block = make_block(txs, step=1 + seed % 50, signer=seed % 21)
    held = txs[rng.random(m) < 0.8] if m else TxBatch.empty()
    noise = make_batch(start + 10**7, int(rng.integers(0, 200)))
    pool = TxBatch.concat([held, noise])
    c = pcb.encode(block, filter_of(held))
    res = pcb.decode(c, pool)
    if not res.complete:
        fetched = pcb.get_missing(block, res.missing)
        rebuilt = pcb.complete_with(c, pool, fetched, res.missing)
    else:
        rebuilt = res.block
    assert rebuilt.serialize() == block.serialize()
    assert rebuilt.id == block.id


@given(st.integers(0, 80), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_size_dominance_and_monotonicity(m, seed):
    rng = np.random.default_rng(seed)
    txs = make_batch(seed, m)
    block = make_block(txs)
    f = CountingBloomFilter(max(64, 8 * m), salt=seed)
    prev = pcb.encode(block, f).size
    full_with_tag = block.size + 9 + (m + 7) // 8
    assert prev <= full_with_tag
    for i in rng.permutation(m):
        f.add(txs.ids[i : i + 1])
        size = pcb.encode(block, f).size
        assert size <= prev
        prev = size


@given(st.integers(0, 60), st.integers(0, 2**32))
@settings(max_examples=30, deadline=None)
def test_wire_round_trip(m, seed):
    rng = np.random.default_rng(seed)
    block = make_block(make_batch(seed, m))
    c = pcb.encode_with_mask(block, rng.random(m) < 0.5)
    data = c.serialize()
    assert len(data) == c.size
    back = pcb.CompactBlock.deserialize(data)
    assert back.serialize() == data
    assert back.block_id == block.id
    assert [type(e) for e in back.entries] == [type(e) for e in c.entries]


def test_entries_follow_block_order():
    txs = make_batch(0, 6)
    block = make_block(txs)
    mask = np.array([1, 0, 1, 1, 0, 0], bool)
    c = pcb.encode_with_mask(block, mask)
    kinds = [isinstance(e, pcb.ShortId) for e in c.entries]
    assert kinds == mask.tolist()
    fulls = [e.tx for e in c.entries if isinstance(e, pcb.FullTx)]
    assert fulls == [txs[1], txs[4], txs[5]]
