"""Deterministic teacher simulator: contexts, structured CoT, filter-passing plans, counterfactual anchors."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from typing import Callable, Iterable

from .filter import filter_dataset
from .plan import (
    REF_PREFIX,
    ContextBundle,
    Intent,
    Plan,
    SpatioTemporalContext,
    ToolLibrary,
    ToolSpec,
    serialize_plan,
)
from .scaffold import THOUGHT_CLOSE, THOUGHT_OPEN
from .scdpo import ST_FIELDS, CounterfactualAnchor, DegeneratePair, materialize_pairs

CUISINES = ("local", "hotpot", "noodles", "cafe", "snacks")


class NoTemplateMatch(LookupError):
    pass


@dataclass(frozen=True)
class City:
    name: str
    lat: tuple[float, float]
    lon: tuple[float, float]

    def contains(self, location: tuple[float, float]) -> bool:
        return self.lat[0] <= location[0] <= self.lat[1] and self.lon[0] <= location[1] <= self.lon[1]

    def district(self, location: tuple[float, float]) -> str:
        """Coarse 2x2 grid cell name of a location inside the city box."""
        north = location[0] >= (self.lat[0] + self.lat[1]) / 2
        east = location[1] >= (self.lon[0] + self.lon[1]) / 2
        return f"{self.name}_{'n' if north else 's'}{'e' if east else 'w'}"


CITIES = {
    c.name: c
    for c in (
        City("beijing", (39.80, 40.10), (116.20, 116.60)),
        City("shanghai", (31.10, 31.40), (121.30, 121.70)),
        City("hangzhou", (30.20, 30.35), (120.05, 120.30)),
        City("chengdu", (30.55, 30.75), (103.95, 104.20)),
    )
}


def default_library(max_plan_len: int = 8) -> ToolLibrary:
    T = ToolSpec
    return ToolLibrary(
        [
            T("ride_hail", {"origin", "dest"}, {"class"}, {"class": {"economy", "comfort"}},
              produces={"destination"}, exclusivity_class="travel", exclusivity_bound=1),
            T("route_to", {"dest", "mode"}, (), {"mode": {"walk", "drive", "transit"}}, produces={"destination"}),
            T("commute_route", {"origin", "dest", "mode"}, (), {"mode": {"drive", "transit"}},
              produces={"destination"}),
            T("intercity_ticket", {"from_city", "to_city", "mode"}, (), {"mode": {"train", "flight"}},
              produces={"station"}),
            T("hotel_checkin", {"hotel"}, (), produces={"hotel"}, consumes={"destination"}),
            T("hotel_booking", {"city"}, (), produces={"hotel"}),
            T("food_nearby", {"near", "cuisine"}, {"budget"}, {"cuisine": set(CUISINES), "budget": {"low", "mid", "high"}},
              produces={"restaurant"}),
            T("table_reservation", {"restaurant", "party"}, (), {"party": {"1", "2", "4"}}, consumes={"restaurant"}),
            T("leisure_nearby", {"near"}, (), consumes={"destination", "hotel"}),
            T("scenic_spots", {"city"}, (), produces={"spot"}),
            T("weather", {"city"}),
            T("traffic_report", {"city"}),
            T("coffee_nearby", {"near"}, (), consumes={"destination"}),
        ],
        max_plan_len=max_plan_len,
    )


def _ref(label: str) -> str:
    return REF_PREFIX + label


def _facts(ctx: ContextBundle) -> dict:
    u = ctx.user_map
    st = ctx.st
    city = CITIES[st.city]
    return {
        "city": st.city,
        "home": u["home_city"],
        "away": st.city != u["home_city"],
        "hour": st.time.hour,
        "weekend": st.is_weekend,
        "holiday": st.is_holiday,
        "booking": bool(u.get("hotel_booking")),
        "hotel": f"{st.city}_grand_hotel",
        "cuisine": u["cuisine"],
        "here": city.district(st.location),
        "airport": f"{st.city}_airport",
        "trip_city": u["trip_city"],
        "car": u["commute_mode"] == "drive",
    }


@dataclass(frozen=True)
class ScenarioTemplate:
    """A trigger over the context plus plan and reasoning generators."""

    id: str
    trigger: Callable[[dict], bool]
    plan_skeleton: Callable[[dict, random.Random], list[Intent]]
    strategy: str
    reasons: dict[str, str]

    def matches(self, ctx: ContextBundle) -> bool:
        return self.trigger(_facts(ctx))


def _holiday_plan(f, rng):
    to_city = f["trip_city"]
    return [
        Intent("intercity_ticket", {"from_city": f["home"], "to_city": to_city, "mode": rng.choice(["train", "flight"])}),
        Intent("ride_hail", {"origin": f["here"], "dest": _ref("station"), "class": "economy"}),
        Intent("hotel_booking", {"city": to_city}),
        Intent("weather", {"city": to_city}),
        Intent("scenic_spots", {"city": to_city}),
        Intent("food_nearby", {"near": _ref("hotel"), "cuisine": f["cuisine"]}),
        Intent("leisure_nearby", {"near": _ref("hotel")}),
    ]


def _arrival_plan(f, rng):
    return [
        Intent("ride_hail", {"origin": f["airport"], "dest": f["hotel"], "class": rng.choice(["economy", "comfort"])}),
        Intent("hotel_checkin", {"hotel": _ref("destination")}),
        Intent("food_nearby", {"near": _ref("hotel"), "cuisine": f["cuisine"]}),
        Intent("leisure_nearby", {"near": _ref("hotel")}),
        Intent("scenic_spots", {"city": f["city"]}),
    ]


def _evening_plan(f, rng):
    return [
        Intent("route_to", {"dest": f["hotel"], "mode": "drive" if f["car"] else "walk"}),
        Intent("food_nearby", {"near": _ref("destination"), "cuisine": "snacks"}),
        Intent("leisure_nearby", {"near": _ref("destination")}),
        Intent("weather", {"city": f["city"]}),
    ]


def _commute_plan(f, rng):
    return [
        Intent("traffic_report", {"city": f["city"]}),
        Intent("commute_route", {"origin": "home", "dest": "work", "mode": "drive" if f["car"] else "transit"}),
        Intent("coffee_nearby", {"near": _ref("destination")}),
    ]


def _leisure_plan(f, rng):
    return [
        Intent("weather", {"city": f["city"]}),
        Intent("scenic_spots", {"city": f["city"]}),
        Intent("ride_hail", {"origin": f["here"], "dest": _ref("spot"), "class": "economy"}),
        Intent("leisure_nearby", {"near": _ref("destination")}),
        Intent("food_nearby", {"near": _ref("destination"), "cuisine": f["cuisine"]}),
        Intent("route_to", {"dest": "home", "mode": "transit"}),
    ]


def _dining_plan(f, rng):
    return [
        Intent("food_nearby", {"near": f["here"], "cuisine": f["cuisine"]}),
        Intent("table_reservation", {"restaurant": _ref("restaurant"), "party": rng.choice(["1", "2", "4"])}),
        Intent("route_to", {"dest": _ref("restaurant"), "mode": "walk"}),
    ]


_REASONS = {
    "ride_hail": "to cover the next leg without a car",
    "route_to": "so the user knows the way",
    "commute_route": "for the usual commute",
    "intercity_ticket": "because the trip starts with a long leg",
    "hotel_checkin": "as the hotel is the next anchor",
    "hotel_booking": "to secure a place to stay",
    "food_nearby": "as a meal fits this time",
    "table_reservation": "to avoid waiting",
    "leisure_nearby": "for time left after arrival",
    "scenic_spots": "to suggest sights in the city",
    "weather": "since weather shapes the plan",
    "traffic_report": "since traffic decides departure",
    "coffee_nearby": "for a short stop on arrival",
}

# Priority order: the first matching template wins.
DEFAULT_TEMPLATES = (
    ScenarioTemplate("holiday_travel", lambda f: f["holiday"] and not f["away"] and 6 <= f["hour"] < 12,
                     _holiday_plan, "start the holiday trip then settle near the hotel", _REASONS),
    ScenarioTemplate("cross_city_arrival", lambda f: f["away"] and f["booking"] and 10 <= f["hour"] < 20,
                     _arrival_plan, "move to the hotel then rebase nearby services on it", _REASONS),
    ScenarioTemplate("hotel_evening", lambda f: f["away"] and f["booking"] and (f["hour"] >= 20 or f["hour"] < 2),
                     _evening_plan, "head back to the hotel and keep the night short", _REASONS),
    ScenarioTemplate("morning_commute",
                     lambda f: not f["away"] and not f["weekend"] and not f["holiday"] and 7 <= f["hour"] < 10,
                     _commute_plan, "get the user to work on time", _REASONS),
    ScenarioTemplate("weekend_leisure", lambda f: not f["away"] and (f["weekend"] or f["holiday"]) and 10 <= f["hour"] < 18,
                     _leisure_plan, "plan a relaxed outing in the home city", _REASONS),
    ScenarioTemplate("dining", lambda f: not f["away"] and (11 <= f["hour"] < 14 or 17 <= f["hour"] < 20),
                     _dining_plan, "find a meal close to the current spot", _REASONS),
)


def match_template(ctx: ContextBundle, templates=DEFAULT_TEMPLATES) -> ScenarioTemplate:
    for tpl in templates:
        if tpl.matches(ctx):
            return tpl
    raise NoTemplateMatch("no scenario template matches the context")


def _random_location(city: City, rng: random.Random) -> tuple[float, float]:
    return (round(rng.uniform(*city.lat), 5), round(rng.uniform(*city.lon), 5))


def generate_context(seed: int | random.Random, library: ToolLibrary | None = None) -> ContextBundle:
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    names = sorted(CITIES)
    home = rng.choice(names)
    city = home if rng.random() < 0.6 else rng.choice([c for c in names if c != home])
    user = {
        "user_id": f"u{rng.randrange(10**6):06d}",
        "home_city": home,
        "cuisine": rng.choice(CUISINES),
        "commute_mode": rng.choice(["drive", "transit"]),
        "hotel_booking": city != home and rng.random() < 0.8,
        "trip_city": rng.choice([c for c in names if c != home]),
    }
    history_tools = ["ride_hail", "food_nearby", "weather", "commute_route", "scenic_spots", "coffee_nearby"]
    history = [rng.choice(history_tools) for _ in range(rng.randint(0, 4))]
    t = datetime(2025, 1, 1) + timedelta(days=rng.randrange(365), hours=rng.randrange(24), minutes=15 * rng.randrange(4))
    st = SpatioTemporalContext(
        time=t,
        location=_random_location(CITIES[city], rng),
        city=city,
        is_weekend=t.weekday() >= 5,
        is_holiday=rng.random() < 0.15,
    )
    return ContextBundle(user, history, st, library)


def perturb_context(x: ContextBundle, dimensions: Iterable[str], seed: int | random.Random) -> ContextBundle:
    """Change the chosen spatiotemporal dimensions of ``x``.

    Derived fields follow their source: a new time re-derives ``is_weekend``,
    flipping ``is_weekend`` shifts the date, a new city re-samples the location
    inside it. User and history are never touched.
    """
    dims = set(dimensions)
    if not dims:
        raise ValueError("dimensions must be a nonempty subset of the spatiotemporal fields")
    if dims - set(ST_FIELDS):
        raise ValueError(f"unknown dimensions {sorted(dims - set(ST_FIELDS))}")
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    st = x.st
    time, city, location = st.time, st.city, st.location
    is_weekend, is_holiday = st.is_weekend, st.is_holiday
    if "time" in dims:
        while True:
            new = time.replace(hour=rng.randrange(24)) + timedelta(days=rng.randrange(-3, 4))
            if new != time:
                break
        time = new
        is_weekend = time.weekday() >= 5
    if "is_weekend" in dims:
        target = not is_weekend
        step = 1 if rng.random() < 0.5 else -1
        while (time.weekday() >= 5) != target:
            time += timedelta(days=step)
        is_weekend = target
    if "is_holiday" in dims:
        is_holiday = not is_holiday
    if "city" in dims:
        city = rng.choice([c for c in sorted(CITIES) if c != city])
        location = _random_location(CITIES[city], rng)
    if "location" in dims:
        while True:
            new_loc = _random_location(CITIES[city], rng)
            if new_loc != location:
                break
        location = new_loc
    new_st = SpatioTemporalContext(time, location, city, is_weekend, is_holiday)
    return ContextBundle(x.user_map, x.history, new_st, x.library)


def _render_cot(ctx: ContextBundle, tpl: ScenarioTemplate, plan: list[Intent]) -> str:
    f = _facts(ctx)
    when = "holiday" if f["holiday"] else ("weekend" if f["weekend"] else "weekday")
    where = f"away from {f['home']}" if f["away"] else "in the home city"
    context = f"user is in {f['city']} {where} at {f['hour']:02d}:00 on a {when}"
    if f["booking"]:
        context += " with a hotel booking"
    lines = [THOUGHT_OPEN, f"<CONTEXT>{context}</CONTEXT>", f"<STRATEGY>{tpl.strategy}</STRATEGY>"]
    for i, intent in enumerate(plan, 1):
        lines.append(f"<STEP_{i}>recommend {intent.tool} {tpl.reasons[intent.tool]}</STEP_{i}>")
    lines.append(THOUGHT_CLOSE)
    return "\n".join(lines)


def simulate_teacher(context: ContextBundle, templates=DEFAULT_TEMPLATES, seed: int | random.Random = 0):
    """Return ``(cot_text, plan)`` from the first template whose trigger fires."""
    from .scaffold import parse_cot

    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    tpl = match_template(context, templates)
    intents = tpl.plan_skeleton(_facts(context), rng)
    text = _render_cot(context, tpl, intents)
    return parse_cot(text), Plan(intents)


def make_record(ctx: ContextBundle, cot, plan: Plan, template_id: str = "") -> dict:
    rec = {"context": ctx.to_dict(), "cot": cot.render(), "plan": plan.to_list()}
    if template_id:
        rec["template"] = template_id
    return rec


def _draw_matching(rng: random.Random, templates, library):
    while True:
        ctx = generate_context(rng, library)
        try:
            tpl = match_template(ctx, templates)
        except NoTemplateMatch:
            continue
        return ctx, tpl


def build_anchor(ctx: ContextBundle, plan: Plan, rng: random.Random, templates=DEFAULT_TEMPLATES,
                 attempts: int = 50, anchor_id: str = "") -> CounterfactualAnchor | None:
    """Perturb ``ctx`` until a different template fires; None if no attempt works."""
    tpl = match_template(ctx, templates)
    for _ in range(attempts):
        k = rng.choice([1, 1, 2])
        dims = rng.sample(ST_FIELDS, k)
        x_prime = perturb_context(ctx, dims, rng)
        try:
            tpl_p = match_template(x_prime, templates)
        except NoTemplateMatch:
            continue
        if tpl_p.id == tpl.id:
            continue
        _, plan_p = simulate_teacher(x_prime, templates, rng)
        if plan_p == plan:
            continue
        return CounterfactualAnchor(ctx, x_prime, plan, plan_p, anchor_id)
    return None


def pair_record(pair) -> dict:
    return {
        "prompt": pair.prompt.to_dict(),
        "chosen": pair.chosen.to_list(),
        "rejected": pair.rejected.to_list(),
        "direction": pair.direction,
        "anchor_id": pair.anchor_id,
    }


def build_dataset(n: int, seed: int, templates=DEFAULT_TEMPLATES, library: ToolLibrary | None = None,
                  test_fraction: float = 0.01, min_test: int = 10):
    """Generate ``(train, test, pairs)`` record lists.

    Anchors are built from training contexts only, each materialized in both
    directions. Every train/test record is re-checked by the filter.
    """
    if n < 10:
        raise ValueError("n must be >= 10")
    library = library or default_library()
    rng = random.Random(seed)
    records = []
    contexts = []
    for _ in range(n):
        ctx, tpl = _draw_matching(rng, templates, library)
        cot, plan = simulate_teacher(ctx, templates, rng)
        records.append(make_record(ctx, cot, plan, tpl.id))
        contexts.append((ctx, plan))
    kept, rejected, _ = filter_dataset(records, library)
    if rejected:
        raise AssertionError(f"generator produced {len(rejected)} filter-failing records")

    n_test = max(min_test, round(n * test_fraction))
    n_test = min(n_test, n - 1)
    train, test = records[: n - n_test], records[n - n_test:]

    pairs = []
    for i, (ctx, plan) in enumerate(contexts[: n - n_test]):
        anchor = build_anchor(ctx, plan, rng, templates, anchor_id=f"a{i:06d}")
        if anchor is None:
            continue
        try:
            p1, p2 = materialize_pairs(anchor)
        except DegeneratePair:
            continue
        pairs.extend([pair_record(p1), pair_record(p2)])
    return train, test, pairs


def corrupt_records(records: list[dict], p: float, seed: int, library: ToolLibrary | None = None):
    """Plant one violation (at a random tier) into each record with probability ``p``.

    Returns ``(records, planted)`` where ``planted`` lists
    ``{"index", "tier", "kind"}`` for every corrupted record.
    """
    library = library or default_library()
    rng = random.Random(seed)
    out, planted = [], []
    for i, rec in enumerate(records):
        rec = json.loads(json.dumps(rec))
        if rng.random() < p:
            tier = rng.choice(["FORMAT", "SCHEMA", "LOGIC"])
            kind = _CORRUPTORS[tier](rec, rng, library)
            planted.append({"index": i, "tier": tier, "kind": kind})
        out.append(rec)
    return out, planted


def _corrupt_format(rec, rng, library):
    kind = rng.choice(["truncated", "empty", "object", "too_long"])
    text = json.dumps(rec["plan"], sort_keys=True, separators=(",", ":"))
    if kind == "truncated":
        rec["plan"] = text[: rng.randrange(1, len(text) - 1)]
    elif kind == "empty":
        rec["plan"] = "[]"
    elif kind == "object":
        rec["plan"] = json.dumps(rec["plan"][0], sort_keys=True)
    else:
        items = rec["plan"]
        while len(items) <= library.max_plan_len:
            items = items + items
        rec["plan"] = json.dumps(items, sort_keys=True)
    return kind


def _corrupt_schema(rec, rng, library):
    plan = rec["plan"]
    kinds = ["unknown_tool", "missing_param"]
    if any(library[a["tool"]].enum_params for a in plan):
        kinds.append("bad_enum")
    kind = rng.choice(kinds)
    if kind == "unknown_tool":
        rng.choice(plan)["tool"] = "teleport"
    elif kind == "missing_param":
        a = rng.choice([a for a in plan if library[a["tool"]].required_params])
        del a["params"][rng.choice(sorted(library[a["tool"]].required_params))]
    else:
        a = rng.choice([a for a in plan if library[a["tool"]].enum_params])
        a["params"][rng.choice(sorted(library[a["tool"]].enum_params))] = "luxury"
    return kind


def _corrupt_logic(rec, rng, library):
    plan = rec["plan"]
    # refs only ever sit in free-text params, so rewriting one cannot trip the enum check
    ref_slots = [(k, name) for k, a in enumerate(plan) for name, v in a["params"].items()
                 if v.startswith(REF_PREFIX)]
    n_travel = sum(1 for a in plan if library[a["tool"]].exclusivity_class == "travel")
    kinds = []
    if ref_slots:
        kinds.append("unresolved_ref")
    if len(plan) + 2 - n_travel <= library.max_plan_len:
        kinds.append("exclusivity")
    kind = rng.choice(kinds)
    if kind == "unresolved_ref":
        k, name = rng.choice(ref_slots)
        plan[k]["params"][name] = REF_PREFIX + "voucher"
    else:
        extra = {"tool": "ride_hail", "params": {"origin": "home", "dest": "airport", "class": "economy"}}
        while sum(1 for a in plan if a["tool"] == "ride_hail") < 2:
            plan.insert(rng.randrange(len(plan) + 1), json.loads(json.dumps(extra)))
    return kind


_CORRUPTORS = {"FORMAT": _corrupt_format, "SCHEMA": _corrupt_schema, "LOGIC": _corrupt_logic}


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
