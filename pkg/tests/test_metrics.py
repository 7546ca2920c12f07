import math

import pytest
from hypothesis import given, strategies as st

from gplan.metrics import EditCosts, acc_at_1, edit_distance, latent_valid_rate, ndcg_at_k, nes
from gplan.plan import Intent
from gplan.scaffold import DiagnosticResult, Diag

from oracles import brute_edit_distance


def I(tool, v="x"):
    return Intent(tool, {"p": v})


def as_pairs(seq):
    return [(a.tool, a.params) for a in seq]


def test_nes_examples():
    a = [I("ride_hail"), I("food_nearby")]
    assert nes(a, a) == 1.0
    assert math.isclose(nes([I("ride_hail", "y"), I("food_nearby")], a), 1 - 0.3 / 2)
    assert nes([I("weather")], a) == 0.0
    assert nes([], a) == 0.0
    assert nes([], []) == 1.0


def test_acc_examples():
    truth = [I("ride_hail", "a"), I("weather")]
    assert acc_at_1([I("ride_hail", "b")], truth) == 1
    assert acc_at_1([I("ride_hail", "b")], truth, strict=True) == 0
    assert acc_at_1([I("ride_hail", "a")], truth, strict=True) == 1
    assert acc_at_1([], truth) == 0
    with pytest.raises(ValueError):
        acc_at_1(truth, [])


def test_ndcg_examples():
    truth = [I("a"), I("b"), I("c")]
    assert ndcg_at_k(truth, truth) == 1.0
    assert ndcg_at_k([I("z")] * 3, truth) == 0.0
    # one hit at rank 2 against a single-item truth
    assert math.isclose(ndcg_at_k([I("z"), I("a")], [I("a")]), 1 / math.log2(3))
    # duplicates only earn one credit per truth occurrence
    assert math.isclose(ndcg_at_k([I("a"), I("a")], [I("a"), I("b")]),
                        1.0 / (1 + 1 / math.log2(3)))


def brute_ndcg(pred, truth, k):
    remaining = list(truth)
    dcg = 0.0
    for i, t in enumerate(pred[:k]):
        if t in remaining:
            remaining.remove(t)
            dcg += 1 / math.log2(i + 2)
    idcg = sum(1 / math.log2(i + 2) for i in range(min(k, len(truth))))
    return dcg / idcg


tools = st.sampled_from(["a", "b", "c"])
intents = st.builds(I, tools, st.sampled_from(["x", "y"]))
seqs = st.lists(intents, max_size=5)


@given(seqs, seqs.filter(bool), st.integers(1, 5))
def test_ndcg_matches_oracle_and_bounds(pred, truth, k):
    got = ndcg_at_k(pred, truth, k)
    assert 0.0 <= got <= 1.0 + 1e-12
    assert math.isclose(got, brute_ndcg([a.tool for a in pred], [a.tool for a in truth], k), abs_tol=1e-12)


@given(st.lists(intents, max_size=4), st.lists(intents, max_size=4))
def test_edit_distance_matches_brute_force(s, t):
    assert math.isclose(edit_distance(s, t), brute_edit_distance(as_pairs(s), as_pairs(t)), abs_tol=1e-12)


@given(seqs, seqs, seqs)
def test_edit_distance_metric_properties(a, b, c):
    assert edit_distance(a, a) == 0
    assert math.isclose(edit_distance(a, b), edit_distance(b, a), abs_tol=1e-12)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c) + 1e-12
    assert 0.0 <= nes(a, b) <= 1.0


def test_costs_validation():
    with pytest.raises(ValueError):
        EditCosts(param_substitution=2.0)
    with pytest.raises(ValueError):
        EditCosts(insert=0)


def test_latent_valid_rate():
    ok, bad = DiagnosticResult(Diag.VALID), DiagnosticResult(Diag.WRAPPER)
    assert latent_valid_rate([ok, bad, ok, ok]) == 0.75
    assert latent_valid_rate([]) is None
