"""Turn dataset records into token sequences with section masks for the toy policy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from .curriculum import Section, blocks_for_sample
from .plan import ContextBundle, FormatError, Plan, parse_plan, plan_from_list, serialize_plan
from .scaffold import LatentVocab, THOUGHT_CLOSE, compress, parse_cot, tokenize

BOS = "<BOS>"
EOS = "<EOS>"
ST_MARK = "<ST>"
PLAN_CLOSE = "]"


def context_signature(ctx: ContextBundle) -> str:
    """One token summarizing the discretized spatiotemporal state."""
    u = ctx.user_map
    st = ctx.st
    away = "away" if st.city != u.get("home_city") else "home"
    booking = "bk" if u.get("hotel_booking") else "nb"
    day = "we" if st.is_weekend else "wd"
    hol = "hol" if st.is_holiday else "reg"
    return f"<ctx:{away}:{booking}:h{st.time.hour:02d}:{day}:{hol}>"


def prompt_tokens(ctx: ContextBundle) -> list[str]:
    u = ctx.user_map
    toks = [BOS, f"home:{u.get('home_city')}", f"pref:{u.get('cuisine')}"]
    toks += [f"hist:{h}" for h in ctx.history[-2:]]
    toks += [ST_MARK, context_signature(ctx)]
    return toks


def plan_tokens(plan: Plan) -> list[str]:
    """Concatenative plan tokens: one per intent plus the closing bracket.

    Joining the tokens reproduces ``serialize_plan(plan)`` exactly.
    """
    toks = [("[" if k == 0 else ",") + a.to_json() for k, a in enumerate(plan.intents)]
    return toks + [PLAN_CLOSE]


def plan_from_tokens(tokens) -> Plan | None:
    text = "".join(tokens)
    try:
        return parse_plan(text)
    except FormatError:
        return None


@dataclass(frozen=True)
class CompiledRecord:
    prompt: tuple[str, ...]
    prefix_tokens: tuple[str, ...]
    json_target: str
    json_tokens: tuple[str, ...]
    stage_b: int
    B: int

    @property
    def target(self) -> list[str]:
        return [*self.prefix_tokens, *self.json_tokens]

    @property
    def section_mask(self) -> list[int]:
        return [Section.COT] * len(self.prefix_tokens) + [Section.JSON] * len(self.json_tokens)

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt": list(self.prompt),
            "prefix_tokens": list(self.prefix_tokens),
            "json_target": self.json_target,
            "stage_b": self.stage_b,
            "B": self.B,
            "section_mask": [Section(m).name for m in self.section_mask],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CompiledRecord":
        plan = parse_plan(d["json_target"])
        return cls(tuple(d["prompt"]), tuple(d["prefix_tokens"]), d["json_target"],
                   tuple(plan_tokens(plan) + [EOS]), d["stage_b"], d["B"])


def record_plan(record: Mapping[str, Any]) -> Plan:
    plan = record["plan"]
    return parse_plan(plan) if isinstance(plan, str) else plan_from_list(plan)


def compile_record(record: Mapping[str, Any], stage: int, vocab: LatentVocab | None = None) -> CompiledRecord:
    """Compile a dataset record at curriculum stage ``stage`` (clamped to its block count)."""
    ctx = ContextBundle.from_dict(record["context"])
    plan = record_plan(record)
    cot = parse_cot(record["cot"])
    B = blocks_for_sample(len(plan))
    if cot.n_steps != len(plan):
        raise ValueError(f"CoT has {cot.n_steps} steps for a plan of length {len(plan)}")
    prefix = compress(cot, min(stage, B), vocab)
    return CompiledRecord(
        prompt=tuple(prompt_tokens(ctx)),
        prefix_tokens=tuple(prefix.atoms()),
        json_target=serialize_plan(plan),
        json_tokens=tuple(plan_tokens(plan) + [EOS]),
        stage_b=min(stage, B),
        B=B,
    )


def split_decoded(tokens) -> tuple[list[str], list[str]]:
    """Split a decoded output into (reasoning prefix, plan tokens)."""
    tokens = list(tokens)
    if EOS in tokens:
        tokens = tokens[: tokens.index(EOS)]
    if THOUGHT_CLOSE in tokens:
        cut = tokens.index(THOUGHT_CLOSE) + 1
        return tokens[:cut], tokens[cut:]
    return tokens, []
