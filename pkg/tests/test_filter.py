import itertools
import json

import pytest
from hypothesis import given, settings, strategies as st

from gplan.filter import check_logic, check_plan_text, check_record, filter_dataset
from gplan.plan import Intent, Plan, ToolLibrary, ToolSpec
from gplan.synth import build_dataset, corrupt_records, default_library

from oracles import brute_logic_ok

LIB = default_library()

SMALL = ToolLibrary([
    ToolSpec("a", {"p"}, produces={"x"}),
    ToolSpec("b", {"p"}, produces={"y"}),
    ToolSpec("c", {"p"}),
    ToolSpec("d", {"p"}, exclusivity_class="travel", exclusivity_bound=1),
    ToolSpec("e", {"p"}, produces={"x"}, exclusivity_class="travel", exclusivity_bound=2),
])


def test_logic_matches_brute_force_exhaustively():
    produces = {t.name: set(t.produces) for t in SMALL}
    excl = {t.name: (t.exclusivity_class, t.exclusivity_bound) if t.exclusivity_class else None for t in SMALL}
    atoms = [(tool, v) for tool in "abcde" for v in ("lit", "$ref:x", "$ref:y")]
    intents = {a: Intent(a[0], {"p": a[1]}) for a in atoms}
    n = 0
    for length in range(1, 5):
        for combo in itertools.product(atoms, repeat=length):
            got = check_logic(Plan([intents[a] for a in combo]), SMALL).passed
            want = brute_logic_ok([(t, {"p": v}) for t, v in combo], produces, excl)
            assert got == want, combo
            n += 1
    assert n == 15 + 15**2 + 15**3 + 15**4


def _rec(plan):
    return {"plan": plan}


GOOD = [{"tool": "scenic_spots", "params": {"city": "beijing"}},
        {"tool": "ride_hail", "params": {"origin": "here", "dest": "$ref:spot"}}]


@pytest.mark.parametrize("plan,tier,code", [
    (GOOD, None, None),
    ("[{\"tool\":", "FORMAT", "BAD_FORMAT"),
    ([{"tool": "teleport", "params": {}}], "SCHEMA", "UNKNOWN_TOOL"),
    ([{"tool": "weather", "params": {}}], "SCHEMA", "MISSING_PARAM"),
    ([{"tool": "weather", "params": {"city": "x", "zip": "1"}}], "SCHEMA", "UNKNOWN_PARAM"),
    ([{"tool": "ride_hail", "params": {"origin": "a", "dest": "b", "class": "luxury"}}], "SCHEMA", "BAD_ENUM"),
    ([{"tool": "ride_hail", "params": {"origin": "a", "dest": "$ref:spot"}}], "LOGIC", "UNRESOLVED_REF"),
    ([{"tool": "ride_hail", "params": {"origin": "a", "dest": "b"}}] * 2, "LOGIC", "EXCLUSIVITY"),
])
def test_tiers(plan, tier, code):
    v = check_record(_rec(plan), LIB)
    assert v.tier == tier and v.code == code
    assert v.passed == (tier is None)


def test_earliest_tier_wins():
    # unknown tool and an unresolved ref: schema is reported
    plan = [{"tool": "teleport", "params": {}}, {"tool": "coffee_nearby", "params": {"near": "$ref:nothing"}}]
    assert check_record(_rec(plan), LIB).tier == "SCHEMA"


def test_ten_record_corpus_with_one_violation_per_tier():
    recs = [_rec(GOOD) for _ in range(7)] + [_rec("nope"), _rec([{"tool": "teleport", "params": {}}]),
                                              _rec([GOOD[1]])]
    kept, rejected, rate = filter_dataset(recs, LIB)
    assert rate == 0.3 and len(kept) == 7
    assert [v.tier for _, v in rejected] == ["FORMAT", "SCHEMA", "LOGIC"]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
def test_corruption_is_caught_at_planted_tier(seed, p):
    train, _, _ = build_dataset(30, seed)
    corrupted, planted = corrupt_records(train, p, seed)
    kept, rejected, rate = filter_dataset(corrupted, LIB)
    verdicts = {id(r): v for r, v in rejected}
    by_index = {x["index"]: x for x in planted}
    for i, rec in enumerate(corrupted):
        v = verdicts.get(id(rec))
        if i in by_index:
            assert v is not None and v.tier == by_index[i]["tier"], (by_index[i], v)
        else:
            assert v is None
    assert filter_dataset(kept, LIB)[1] == []


def test_pass_implies_schema_and_logic_pass():
    train, _, _ = build_dataset(40, 3)
    for rec in train:
        assert check_record(rec, LIB).passed
        text = json.dumps(rec["plan"])
        assert check_plan_text(text, LIB).passed
