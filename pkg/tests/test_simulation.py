import numpy as np
import pytest

from exclique.chain import BlockKind, Ledger, verify_block
from exclique.consensus import recents_window
from exclique.experiment import ExperimentConfig, run
from exclique.simulation import FaultScript, trace_digest
from exclique.txpool import TxTable, pending_target


def small(algo, **kw):
    base = {"algo": algo, "n": 7, "m": 200, "steps": 40, "seed": 3}
    base.update(kw)
    return run(ExperimentConfig(**base))


@pytest.mark.parametrize("algo", ["clique", "clique-bcb", "exclique"])
def test_committed_chain_invariants(algo):
    art = small(algo, faults={"fail_rate": 0.1})
    chain = art.result.committed
    params = art.config.protocol()
    assert [b.step for b in chain] == list(range(len(chain)))
    assert len(chain) == art.config.steps + 1
    ledger = Ledger(chain[0])
    for block in chain[1:]:
        assert block.tx_count <= params.m
        recents = ledger.recent_signers(block.parent_id, params.window)
        assert verify_block(block, params, recents).ok
        ledger.append_candidate(block)
    ids = np.concatenate([b.txs.nonce for b in chain[1:]])
    assert len(ids) == len(np.unique(ids))
    # Distinct signers over any recents window plus one.
    span = recents_window(params.n) + 1
    signers = [b.signer for b in chain[1:]]
    for i in range(len(signers) - span + 1):
        assert len(set(signers[i:i + span])) == span


def test_failed_steps_filled_by_no_turn_blocks():
    art = small("exclique", faults={"fail_steps": [10, 20]})
    chain = art.result.committed
    assert chain[10].kind is BlockKind.NO_TURN
    assert chain[20].kind is BlockKind.NO_TURN
    assert {r["step"] for r in art.result.trace.of_type("in_turn_failed")} == {10, 20}


def test_fault_script_nonadjacent():
    steps = FaultScript(fail_rate=0.1).failing_steps(20000, seed=5)
    s = sorted(steps)
    assert all(b - a > 1 for a, b in zip(s, s[1:]))
    assert abs(len(steps) / 20000 - 0.1) < 0.01
    assert FaultScript(fail_rate=0.1).failing_steps(500, 5) == FaultScript(fail_rate=0.1).failing_steps(500, 5)
    with pytest.raises(ValueError):
        FaultScript(fail_rate=0.6).failing_steps(10, 0)


def test_same_seed_same_trace():
    a = small("exclique", steps=20)
    b = small("exclique", steps=20)
    assert trace_digest(a.result.trace) == trace_digest(b.result.trace)
    c = small("exclique", steps=20, seed=4)
    assert trace_digest(a.result.trace) != trace_digest(c.result.trace)


def test_txtable_bookkeeping():
    table = TxTable(4, seed=1)
    rng = np.random.default_rng(0)
    rows = table.generate(100, 0.5, rng)
    assert len(rows) == 100 and table.present[:, rows].any(axis=0).all()
    node = int(np.argmax(table.present.sum(axis=1)))
    picked = table.pick(node, 10)
    batch = table.batch(picked)
    assert len(table.remove(node, batch)) == 10
    assert not table.present[node, picked].any()
    # Dropping the rows entirely and re-injecting restores them.
    table.present[:, picked] = False
    table.compact()
    assert len(table) == 90
    back = table.reinject(node, batch)
    assert len(back) == 10
    assert set(table.g[back]) == set(batch.nonce)
    assert np.all(np.diff(table.g) > 0)


def test_pending_target():
    assert pending_target(0, 0.9) == 0
    assert pending_target(1000, 0.5, slack=2.0) == 4000
