"""Data model for contexts, tool schemas, intents and plans."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Mapping

DEFAULT_MAX_PLAN_LEN = 8
REF_PREFIX = "$ref:"


class FormatError(ValueError):
    """Raised when a plan text is not a well-formed JSON array of intents."""

    def __init__(self, position: int, reason: str):
        super().__init__(f"{reason} (at char {position})")
        self.position = position
        self.reason = reason


def is_ref(value: str) -> bool:
    return isinstance(value, str) and value.startswith(REF_PREFIX)


def ref_label(value: str) -> str:
    return value[len(REF_PREFIX):]


@dataclass(frozen=True)
class ToolSpec:
    name: str
    required_params: frozenset[str] = frozenset()
    optional_params: frozenset[str] = frozenset()
    enum_params: Mapping[str, frozenset[str]] = field(default_factory=dict)
    produces: frozenset[str] = frozenset()
    consumes: frozenset[str] = frozenset()
    exclusivity_class: str | None = None
    exclusivity_bound: int = 1

    def __post_init__(self):
        if not self.name:
            raise ValueError("tool name must be nonempty")
        # normalise iterables so specs built from JSON compare equal
        object.__setattr__(self, "required_params", frozenset(self.required_params))
        object.__setattr__(self, "optional_params", frozenset(self.optional_params))
        object.__setattr__(self, "produces", frozenset(self.produces))
        object.__setattr__(self, "consumes", frozenset(self.consumes))
        enums = {k: frozenset(v) for k, v in dict(self.enum_params).items()}
        object.__setattr__(self, "enum_params", enums)
        unknown = set(enums) - (self.required_params | self.optional_params)
        if unknown:
            raise ValueError(f"{self.name}: enum params {sorted(unknown)} are not declared params")
        if self.exclusivity_class is not None and self.exclusivity_bound < 1:
            raise ValueError(f"{self.name}: exclusivity bound must be >= 1")

    @property
    def params(self) -> frozenset[str]:
        return self.required_params | self.optional_params

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "name": self.name,
            "required_params": sorted(self.required_params),
            "optional_params": sorted(self.optional_params),
            "enum_params": {k: sorted(v) for k, v in sorted(self.enum_params.items())},
            "produces": sorted(self.produces),
            "consumes": sorted(self.consumes),
        }
        if self.exclusivity_class is not None:
            d["exclusivity_class"] = self.exclusivity_class
            d["exclusivity_bound"] = self.exclusivity_bound
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ToolSpec":
        return cls(
            name=d["name"],
            required_params=frozenset(d.get("required_params", ())),
            optional_params=frozenset(d.get("optional_params", ())),
            enum_params={k: frozenset(v) for k, v in d.get("enum_params", {}).items()},
            produces=frozenset(d.get("produces", ())),
            consumes=frozenset(d.get("consumes", ())),
            exclusivity_class=d.get("exclusivity_class"),
            exclusivity_bound=int(d.get("exclusivity_bound", 1)),
        )


class ToolLibrary:
    """The intent library: an ordered, name-unique collection of ToolSpecs."""

    def __init__(self, tools: Iterable[ToolSpec], max_plan_len: int = DEFAULT_MAX_PLAN_LEN):
        self._tools: dict[str, ToolSpec] = {}
        for spec in tools:
            if spec.name in self._tools:
                raise ValueError(f"duplicate tool name {spec.name!r}")
            self._tools[spec.name] = spec
        if not self._tools:
            raise ValueError("tool library must be nonempty")
        if max_plan_len < 1:
            raise ValueError("max_plan_len must be >= 1")
        self.max_plan_len = max_plan_len

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def __getitem__(self, name: str) -> ToolSpec:
        return self._tools[name]

    def __iter__(self):
        return iter(self._tools.values())

    def __len__(self) -> int:
        return len(self._tools)

    @property
    def names(self) -> list[str]:
        return list(self._tools)

    def to_json(self) -> str:
        return json.dumps([t.to_dict() for t in self], indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, max_plan_len: int = DEFAULT_MAX_PLAN_LEN) -> "ToolLibrary":
        return cls((ToolSpec.from_dict(d) for d in json.loads(text)), max_plan_len=max_plan_len)

    @classmethod
    def load(cls, path: str | Path, max_plan_len: int = DEFAULT_MAX_PLAN_LEN) -> "ToolLibrary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"), max_plan_len=max_plan_len)


@dataclass(frozen=True)
class Intent:
    tool: str
    params: tuple[tuple[str, str], ...] = ()

    def __init__(self, tool: str, params: Mapping[str, str] | Iterable[tuple[str, str]] = ()):
        if not tool:
            raise ValueError("intent tool must be nonempty")
        items = list(params.items()) if isinstance(params, Mapping) else list(params)
        keys = [k for k, _ in items]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate parameter keys in intent {tool!r}")
        object.__setattr__(self, "tool", tool)
        object.__setattr__(self, "params", tuple(sorted(items)))

    @property
    def param_map(self) -> dict[str, str]:
        return dict(self.params)

    def to_dict(self) -> dict[str, Any]:
        return {"tool": self.tool, "params": self.param_map}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class Plan:
    intents: tuple[Intent, ...]

    def __init__(self, intents: Iterable[Intent], max_len: int = DEFAULT_MAX_PLAN_LEN):
        intents = tuple(intents)
        if not 1 <= len(intents) <= max_len:
            raise ValueError(f"plan length {len(intents)} outside [1, {max_len}]")
        object.__setattr__(self, "intents", intents)

    def __len__(self) -> int:
        return len(self.intents)

    def __iter__(self):
        return iter(self.intents)

    def __getitem__(self, i):
        return self.intents[i]

    @property
    def tools(self) -> list[str]:
        return [a.tool for a in self.intents]

    def to_list(self) -> list[dict[str, Any]]:
        return [a.to_dict() for a in self.intents]


def serialize_plan(plan: Plan) -> str:
    """Canonical single-line JSON: sorted keys, no insignificant whitespace."""
    return "[" + ",".join(a.to_json() for a in plan.intents) + "]"


def plan_from_list(items: Any, max_len: int = DEFAULT_MAX_PLAN_LEN) -> Plan:
    """Build a Plan from an already-decoded JSON value. Raises FormatError."""
    if not isinstance(items, list):
        raise FormatError(0, f"top-level value must be an array, got {type(items).__name__}")
    if not 1 <= len(items) <= max_len:
        raise FormatError(0, f"plan length {len(items)} outside [1, {max_len}]")
    intents = []
    for i, obj in enumerate(items):
        if not isinstance(obj, dict):
            raise FormatError(0, f"intent {i} is not an object")
        extra = set(obj) - {"tool", "params"}
        if extra or "tool" not in obj:
            raise FormatError(0, f"intent {i} must have keys tool and params, got {sorted(obj)}")
        tool, params = obj["tool"], obj.get("params", {})
        if not isinstance(tool, str) or not tool:
            raise FormatError(0, f"intent {i} tool must be a nonempty string")
        if not isinstance(params, dict) or not all(isinstance(v, str) for v in params.values()):
            raise FormatError(0, f"intent {i} params must map names to strings")
        intents.append(Intent(tool, params))
    return Plan(intents, max_len=max_len)


def parse_plan(text: str, library: ToolLibrary | None = None, max_len: int | None = None) -> Plan:
    """Parse a plan from JSON text.

    Only the shape is checked here (array of {tool, params} objects with a valid
    length). Tool existence, parameters and references are left to the filter.
    """
    if max_len is None:
        max_len = library.max_plan_len if library is not None else DEFAULT_MAX_PLAN_LEN
    try:
        items = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(exc.pos, f"malformed JSON: {exc.msg}") from None
    return plan_from_list(items, max_len=max_len)


@dataclass(frozen=True)
class SpatioTemporalContext:
    time: datetime
    location: tuple[float, float]
    city: str
    is_weekend: bool
    is_holiday: bool

    def __post_init__(self):
        lat, lon = self.location
        if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
            raise ValueError(f"location {self.location} out of range")

    def to_dict(self) -> dict[str, Any]:
        return {
            "time": self.time.isoformat(),
            "location": [self.location[0], self.location[1]],
            "city": self.city,
            "is_weekend": self.is_weekend,
            "is_holiday": self.is_holiday,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SpatioTemporalContext":
        lat, lon = d["location"]
        return cls(
            time=datetime.fromisoformat(d["time"]),
            location=(float(lat), float(lon)),
            city=d["city"],
            is_weekend=bool(d["is_weekend"]),
            is_holiday=bool(d["is_holiday"]),
        )


@dataclass(frozen=True)
class ContextBundle:
    user: tuple[tuple[str, Any], ...]
    history: tuple[str, ...]
    st: SpatioTemporalContext
    library: ToolLibrary | None = field(default=None, compare=False, repr=False)

    def __init__(self, user: Mapping[str, Any], history: Iterable[str], st: SpatioTemporalContext,
                 library: ToolLibrary | None = None):
        object.__setattr__(self, "user", tuple(sorted(dict(user).items())))
        object.__setattr__(self, "history", tuple(history))
        object.__setattr__(self, "st", st)
        object.__setattr__(self, "library", library)

    @property
    def user_map(self) -> dict[str, Any]:
        return dict(self.user)

    def to_dict(self) -> dict[str, Any]:
        return {"user": self.user_map, "history": list(self.history), "st": self.st.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], library: ToolLibrary | None = None) -> "ContextBundle":
        return cls(d["user"], d["history"], SpatioTemporalContext.from_dict(d["st"]), library)
