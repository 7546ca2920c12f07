"""Three-tier rule-based plan filter: format, schema, logic."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Any, Iterable

from .plan import FormatError, Plan, ToolLibrary, is_ref, parse_plan, ref_label

TIERS = ("FORMAT", "SCHEMA", "LOGIC")


@dataclass(frozen=True)
class FilterVerdict:
    passed: bool
    tier: str | None = None
    code: str | None = None
    message: str = ""

    def __post_init__(self):
        if self.passed != (self.tier is None):
            raise ValueError("tier must be set iff the verdict fails")

    def to_dict(self) -> dict[str, Any]:
        return {"pass": self.passed, "tier": self.tier, "code": self.code, "message": self.message}


PASS = FilterVerdict(True)


def _fail(tier: str, code: str, message: str) -> FilterVerdict:
    return FilterVerdict(False, tier, code, message)


def check_format(raw_text: str, library: ToolLibrary) -> FilterVerdict:
    try:
        parse_plan(raw_text, library)
    except FormatError as exc:
        return _fail("FORMAT", "BAD_FORMAT", str(exc))
    return PASS


def check_schema(plan: Plan, library: ToolLibrary) -> FilterVerdict:
    for k, intent in enumerate(plan, 1):
        if intent.tool not in library:
            return _fail("SCHEMA", "UNKNOWN_TOOL", f"intent {k}: unknown tool {intent.tool!r}")
        spec = library[intent.tool]
        params = intent.param_map
        missing = sorted(spec.required_params - params.keys())
        if missing:
            return _fail("SCHEMA", "MISSING_PARAM", f"intent {k} ({intent.tool}): missing {missing}")
        undeclared = sorted(params.keys() - spec.params)
        if undeclared:
            return _fail("SCHEMA", "UNKNOWN_PARAM", f"intent {k} ({intent.tool}): unknown params {undeclared}")
        for name, allowed in sorted(spec.enum_params.items()):
            if name in params and params[name] not in allowed:
                return _fail("SCHEMA", "BAD_ENUM",
                             f"intent {k} ({intent.tool}): {name}={params[name]!r} not in {sorted(allowed)}")
    return PASS


def check_logic(plan: Plan, library: ToolLibrary) -> FilterVerdict:
    produced: set[str] = set()
    for k, intent in enumerate(plan, 1):
        for name, value in intent.params:
            if is_ref(value) and ref_label(value) not in produced:
                return _fail("LOGIC", "UNRESOLVED_REF",
                             f"intent {k} ({intent.tool}): {name}={value} has no earlier producer")
        produced |= library[intent.tool].produces

    counts = Counter(library[a.tool].exclusivity_class for a in plan if library[a.tool].exclusivity_class)
    for cls, n in sorted(counts.items()):
        bound = min(library[a.tool].exclusivity_bound for a in plan if library[a.tool].exclusivity_class == cls)
        if n > bound:
            return _fail("LOGIC", "EXCLUSIVITY", f"{n} intents of class {cls!r}, bound {bound}")
    return PASS


def raw_plan_text(record: dict) -> str:
    """Plan field as raw text: strings pass through, decoded JSON is re-encoded."""
    plan = record.get("plan")
    if isinstance(plan, str):
        return plan
    return json.dumps(plan, ensure_ascii=False)


def check_plan_text(raw_text: str, library: ToolLibrary) -> FilterVerdict:
    """Run all tiers in order and report the first failure."""
    try:
        plan = parse_plan(raw_text, library)
    except FormatError as exc:
        return _fail("FORMAT", "BAD_FORMAT", str(exc))
    verdict = check_schema(plan, library)
    if not verdict.passed:
        return verdict
    return check_logic(plan, library)


def check_record(record: dict, library: ToolLibrary) -> FilterVerdict:
    return check_plan_text(raw_plan_text(record), library)


def filter_dataset(records: Iterable[dict], library: ToolLibrary):
    """Partition records into (kept, rejected, removal_rate).

    ``rejected`` holds ``(record, verdict)`` pairs; order is preserved in both.
    """
    kept, rejected = [], []
    total = 0
    for rec in records:
        total += 1
        verdict = check_record(rec, library)
        if verdict.passed:
            kept.append(rec)
        else:
            rejected.append((rec, verdict))
    rate = len(rejected) / total if total else 0.0
    return kept, rejected, rate
