import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from exclique import analytics as an
from exclique.consensus import CostModel, default_w, no_turn_count
from exclique.experiment import ExperimentConfig, run

QUIET_NET = {"fixed_base_delay": 5.0, "fixed_loss": 0.0, "bandwidth": float("inf")}


def gap_oracle(n, w):
    """Closed form of E[A - B | A >= B] for A, B each the min of k uniforms on (0, w)."""
    k = no_turn_count(n)
    return 2 * w * k / ((k + 1) * (2 * k + 1))


def test_lambda0():
    assert an.lambda0(8550, 3000) == pytest.approx(2850.0)
    assert an.lambda0(0, 3000) == 0.0
    assert an.lambda0(1000, 1500) == pytest.approx(2 * an.lambda0(1000, 3000))
    with pytest.raises(ValueError):
        an.lambda0(10, 0)


def test_find_m_star():
    assert an.find_m_star(lambda m: 0.3 * m, 3000) == 10000
    with pytest.raises(an.NoFeasibleM):
        an.find_m_star(lambda m: 4000 + m, 3000)
    cost = CostModel()
    grid = np.arange(0, 40000)
    brute = int(grid[np.array([cost.local(int(m)) for m in grid]) <= 3000].max())
    assert an.find_m_star(cost, 3000) == brute


@given(st.floats(0.0, 500.0), st.floats(0.01, 5.0), st.floats(200.0, 10000.0))
@settings(max_examples=60, deadline=None)
def test_find_m_star_affine(c0, c1, t_b):
    assume(c0 + c1 <= t_b)
    m = an.find_m_star(lambda x: c0 + c1 * x, t_b)
    assert c0 + c1 * m <= t_b < c0 + c1 * (m + 1)


def test_delta1_values():
    assert an.delta1(21, 5500) == 500.0
    assert an.delta1(5, 1500) == 500.0
    assert an.delta1(101, default_w(101)) == 500.0


@pytest.mark.parametrize("n", [5, 21, 101])
def test_delta1_monte_carlo(n):
    w = default_w(n)
    samples = an.min_delay_samples(n, w, 100_000, np.random.default_rng(n))
    assert abs(samples.mean() - an.delta1(n, w)) / an.delta1(n, w) < 0.02


def test_lambda1_reduction():
    lam0 = an.lambda0(6000, 3000)
    assert an.lambda1(6000, 3000, 500) / lam0 == pytest.approx(6 / 7)
    assert an.lambda1(6000, 3000, 0) == lam0


def test_conditional_gap_pinned_and_oracle():
    a = an.conditional_gap(21, 5500)
    b = an.conditional_gap(21, 5500, seed=7)
    assert a == pytest.approx(475.8158, abs=1e-3)
    assert abs(a - b) / a < 0.01
    assert abs(a - gap_oracle(21, 5500)) / gap_oracle(21, 5500) < 0.01


def test_gap_symmetry():
    rng = np.random.default_rng(3)
    a = an.min_delay_samples(21, 5500, 200_000, rng)
    b = an.min_delay_samples(21, 5500, 200_000, rng)
    assert abs((a >= b).mean() - 0.5) < 0.01


def test_lambda3_degenerate():
    assert an.lambda3(3000, 3000, 21, 0.0) == pytest.approx(0.5 * an.lambda0(3000, 3000))


def test_expected_tps():
    lam0 = 2000.0
    assert an.expected_tps((1, 0, 0, 0), lam0, 500, 476, 3000) == lam0
    assert an.expected_tps((0, 1, 0, 0), lam0, 500, 476, 3000) == pytest.approx(lam0 * 6 / 7)
    assert an.expected_tps((0, 0, 1, 0), lam0, 500, 476, 3000) == 0.0


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.integers(0, 3), st.floats(0.01, 0.5))
@settings(max_examples=60, deadline=None)
def test_expected_tps_nonincreasing_in_exceptions(raw, which, shift):
    total = sum(raw) or 1.0
    p = [x / total for x in raw]
    if which == 0 or p[0] < shift:
        return
    q = list(p)
    q[0] -= shift
    q[which] += shift
    assert an.expected_tps(q, 1000.0, 500, 476, 3000) <= an.expected_tps(p, 1000.0, 500, 476, 3000) + 1e-9


def test_fork_probabilities():
    assert an.fork_prob_single(0, 0, 5500) == 0
    assert an.fork_prob(0.0, 21) == 0
    assert an.fork_prob_accurate(1000, 500, 1500, 5500, 21) == 0
    p_s = an.fork_prob_single(2000, 750, 5500)
    assert p_s == 0.5
    assert an.fork_prob(p_s, 21) == pytest.approx(1 - 0.5**10)
    assert an.fork_prob_single(9000, 0, 5500) == 1.0


def test_fork_prob_matches_timer_race():
    # A fork happens when some no-turn timer fires before b + v.
    rng = np.random.default_rng(0)
    for n, bv in ((5, 300.0), (21, 800.0), (11, 1500.0)):
        w = default_w(n)
        x = rng.uniform(0, w, size=(100_000, no_turn_count(n)))
        measured = (x.min(axis=1) < bv).mean()
        model = an.fork_prob(an.fork_prob_single(bv, 0, w), n)
        assert abs(measured - model) < 0.01


@given(st.floats(0, 6000), st.floats(0, 6000), st.integers(3, 101))
@settings(max_examples=60, deadline=None)
def test_fork_prob_monotone(a, b, n):
    lo, hi = sorted((a, b))
    w = default_w(n)
    assert an.fork_prob(an.fork_prob_single(lo, 0, w), n) <= an.fork_prob(an.fork_prob_single(hi, 0, w), n)
    p_s = an.fork_prob_single(lo, 0, 5500)
    assert an.fork_prob(p_s, n) <= an.fork_prob(p_s, n + 2) + 1e-12


def test_classify_rules():
    C = an.Case
    assert an.classify("in_turn", 5, "genesis") is C.NORMAL
    assert an.classify("in_turn", 5, "in_turn") is C.NORMAL
    assert an.classify("in_turn", 0, "in_turn") is C.EXC2
    assert an.classify("in_turn", 5, "no_turn") is C.EXC2
    assert an.classify("no_turn", 5, "in_turn") is C.EXC1
    assert an.classify("no_turn", 5, "no_turn") is C.EXC3


def quick(**kw):
    kw.setdefault("network", QUIET_NET)
    return run(ExperimentConfig(**{"algo": "clique", "n": 5, "m": 20, "steps": 30, **kw}))


def test_all_in_turn_trace():
    art = quick()
    r = art.report
    assert r.p0 == 1.0 and r.p_f == 0.0
    assert r.p0 + r.p1 + r.p2 + r.p3 == pytest.approx(1.0)


def test_single_failure_gives_exc1_then_exc2():
    # Differential order hands step 9 to the no-turn winner's successor, so the
    # disruption stays local.
    art = quick(algo="exclique", faults={"fail_steps": [8], "delay_overrides": {"8,0": 900.0, "8,1": 300.0}})
    cases = {s.step: s.case.value for s in art.steps}
    assert cases[8] == "exc1" and cases[9] == "exc2"
    assert sum(v == "exc1" for v in cases.values()) == 1
    assert sum(v == "exc2" for v in cases.values()) == 1


def test_fixed_order_ripple_is_exc3_run():
    over = {"5,2": 100.0, "5,3": 1000.0, "6,3": 100.0, "6,4": 1000.0, "7,4": 100.0, "7,0": 1000.0}
    art = quick(steps=14, faults={"fail_steps": [5], "delay_overrides": over})
    cases = [s.case.value for s in art.steps]
    run_len = best = 0
    for c in cases:
        run_len = run_len + 1 if c == "exc3" else 0
        best = max(best, run_len)
    assert best >= 2


def test_model_matches_measured_when_unstressed():
    art = quick(n=7, m=300, steps=200, network={})
    r = art.report
    assert abs(r.lambda_model - r.tps) / r.tps < 0.1


def test_steps_csv_and_report_json():
    art = quick(steps=12)
    text = an.steps_csv(art.steps)
    assert text.splitlines()[0] == ",".join(an.STEP_COLUMNS)
    assert len(text.splitlines()) == 13
    import json

    data = json.loads(an.report_json(art.report))
    assert data["lambda2"] == 0.0 and "model_vs_measured" in data


def test_malformed_trace():
    with pytest.raises(an.MalformedTrace):
        an.classify_trace([{"type": "run", "n": 5, "m": 1, "t_b": 3000, "w": 1500}])
    with pytest.raises(an.MalformedTrace):
        an.classify_trace([
            {"type": "run", "n": 5, "m": 1, "t_b": 3000, "w": 1500},
            {"type": "commit", "blocks": ["00", "ab"]},
        ])
