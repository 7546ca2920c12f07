"""Structured CoT parsing, latent-triplet compression and the latent-validity diagnostic."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from enum import Enum

THOUGHT_OPEN = "<THOUGHT>"
THOUGHT_CLOSE = "</THOUGHT>"

_TAG_RE = re.compile(r"<(/?)(CONTEXT|STRATEGY|STEP_(\d+))>")
# raw block tags only; latent tokens such as <THOUGHT_CONTEXT_A> or <T_1_A> do not match
RAW_TAG_RE = re.compile(r"^</?(CONTEXT|STRATEGY|STEP_\d+)>$")
_ATOM_RE = re.compile(r"</?[A-Za-z0-9_]+>|[^\s<]+|<")


class CotParseError(ValueError):
    pass


class StageOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class CotBlock:
    kind: str  # "CONTEXT", "STRATEGY" or "STEP"
    text: str
    index: int = 0  # step index, 0 for CONTEXT/STRATEGY

    @property
    def tag(self) -> str:
        return f"STEP_{self.index}" if self.kind == "STEP" else self.kind

    def render(self) -> str:
        return f"<{self.tag}>{self.text}</{self.tag}>"


@dataclass(frozen=True)
class StructuredCot:
    blocks: tuple[CotBlock, ...]
    source: str | None = None
    # (start, end) offsets of every block in `source`, tags included
    spans: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        kinds = [b.kind for b in self.blocks]
        if kinds[:2] != ["CONTEXT", "STRATEGY"] or any(k != "STEP" for k in kinds[2:]) or len(kinds) < 3:
            raise CotParseError(f"block order must be CONTEXT, STRATEGY, STEP_1..n; got {kinds}")
        steps = [b.index for b in self.blocks[2:]]
        if steps != list(range(1, len(steps) + 1)):
            raise CotParseError(f"STEP indices must be 1..n contiguously, got {steps}")

    @property
    def n_steps(self) -> int:
        return len(self.blocks) - 2

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def render(self) -> str:
        if self.source is not None:
            return self.source
        return THOUGHT_OPEN + "".join(b.render() for b in self.blocks) + THOUGHT_CLOSE

    def __eq__(self, other):
        return isinstance(other, StructuredCot) and self.blocks == other.blocks

    def __hash__(self):
        return hash(self.blocks)


def parse_cot(text: str) -> StructuredCot:
    """Parse ``<THOUGHT>...</THOUGHT>`` into CONTEXT, STRATEGY and STEP blocks."""
    start = text.find(THOUGHT_OPEN)
    if start < 0 or text[:start].strip():
        raise CotParseError("missing <THOUGHT> wrapper")
    end = text.rfind(THOUGHT_CLOSE)
    if end < 0 or text[end + len(THOUGHT_CLOSE):].strip():
        raise CotParseError("missing </THOUGHT> wrapper")
    inner_start = start + len(THOUGHT_OPEN)
    if THOUGHT_OPEN in text[inner_start:end] or THOUGHT_CLOSE in text[inner_start:end]:
        raise CotParseError("nested or repeated THOUGHT wrapper")

    blocks: list[CotBlock] = []
    spans: list[tuple[int, int]] = []
    pos = inner_start
    open_match = None
    for m in _TAG_RE.finditer(text, inner_start, end):
        closing, name = m.group(1) == "/", m.group(2)
        if open_match is None:
            if closing:
                raise CotParseError(f"unexpected closing tag </{name}>")
            if text[pos:m.start()].strip():
                raise CotParseError(f"text outside blocks: {text[pos:m.start()].strip()[:30]!r}")
            open_match = m
        else:
            if not closing or name != open_match.group(2):
                raise CotParseError(f"interleaved tags <{open_match.group(2)}> and <{'/' if closing else ''}{name}>")
            kind = "STEP" if name.startswith("STEP_") else name
            index = int(open_match.group(3)) if kind == "STEP" else 0
            blocks.append(CotBlock(kind, text[open_match.end():m.start()], index))
            spans.append((open_match.start(), m.end()))
            open_match = None
            pos = m.end()
    if open_match is not None:
        raise CotParseError(f"unclosed tag <{open_match.group(2)}>")
    if text[pos:end].strip():
        raise CotParseError("text outside blocks before </THOUGHT>")
    kinds = [b.kind for b in blocks]
    if kinds.count("CONTEXT") != 1 or kinds.count("STRATEGY") != 1:
        raise CotParseError("exactly one CONTEXT and one STRATEGY block required")
    if not blocks or len(blocks) < 3:
        raise CotParseError("at least one STEP block required")
    return StructuredCot(tuple(blocks), source=text, spans=tuple(spans))


@dataclass(frozen=True)
class LatentVocab:
    """Reserved latent tokens: a K-token group per CONTEXT, STRATEGY and STEP_i block."""

    K: int = 3
    max_steps: int = 8

    def __post_init__(self):
        if not 1 <= self.K <= 26:
            raise ValueError("K must be in 1..26")

    @property
    def suffixes(self) -> str:
        return string.ascii_uppercase[: self.K]

    @property
    def context(self) -> tuple[str, ...]:
        return tuple(f"<THOUGHT_CONTEXT_{s}>" for s in self.suffixes)

    @property
    def strategy(self) -> tuple[str, ...]:
        return tuple(f"<THOUGHT_STRATEGY_{s}>" for s in self.suffixes)

    def step(self, i: int) -> tuple[str, ...]:
        if not 1 <= i <= self.max_steps:
            raise ValueError(f"step index {i} outside 1..{self.max_steps}")
        return tuple(f"<T_{i}_{s}>" for s in self.suffixes)

    def block(self, j: int) -> tuple[str, ...]:
        """Latent group for the j-th block in scaffold order (0 = CONTEXT)."""
        if j == 0:
            return self.context
        if j == 1:
            return self.strategy
        return self.step(j - 1)

    def scaffold(self, n_steps: int) -> list[str]:
        return [tok for j in range(2 + n_steps) for tok in self.block(j)]

    @property
    def tokens(self) -> list[str]:
        return self.scaffold(self.max_steps)

    def position(self, token: str) -> tuple[int, int] | None:
        """(block index, slot) of a latent token, or None if not latent."""
        return self._positions.get(token)

    @property
    def _positions(self) -> dict[str, tuple[int, int]]:
        cache = self.__dict__.get("_pos_cache")
        if cache is None:
            cache = {tok: (j, k) for j in range(2 + self.max_steps) for k, tok in enumerate(self.block(j))}
            object.__setattr__(self, "_pos_cache", cache)
        return cache


@dataclass(frozen=True)
class ScaffoldPrefix:
    """A (partially) compressed reasoning prefix.

    ``tokens`` mixes latent tokens with verbatim text segments; ``text`` is its
    surface form.
    """

    tokens: tuple[str, ...]
    stage: int
    num_blocks: int
    text: str

    def atoms(self) -> list[str]:
        return tokenize(self.text)


def compress(cot: StructuredCot, b: int, vocab: LatentVocab | None = None) -> ScaffoldPrefix:
    """Replace the leading ``b`` blocks of ``cot`` with their latent groups."""
    vocab = vocab or LatentVocab()
    B = cot.num_blocks
    if not 0 <= b <= B:
        raise StageOutOfRange(f"stage {b} outside [0, {B}]")
    source = cot.render()
    spans = cot.spans
    if spans is None:
        # rebuild spans for a hand-constructed cot
        cot = parse_cot(source)
        spans = cot.spans
    if b == 0:
        return ScaffoldPrefix((source,), 0, B, source)
    latent = [tok for j in range(b) for tok in vocab.block(j)]
    tokens = [THOUGHT_OPEN, *latent]
    parts = [THOUGHT_OPEN, " ".join(latent)]
    if b < B:
        rest = source[spans[b][0]:spans[-1][1]]
        tokens.append(rest)
        parts.append(rest)
    tokens.append(THOUGHT_CLOSE)
    parts.append(THOUGHT_CLOSE)
    return ScaffoldPrefix(tuple(tokens), b, B, " ".join(parts))


def tokenize(text: str) -> list[str]:
    """Split prefix text into atoms: angle-bracket tags are atomic, other text splits on whitespace."""
    return _ATOM_RE.findall(text)


class Diag(str, Enum):
    VALID = "VALID"
    WRAPPER = "WRAPPER"
    REPEATED = "REPEATED"
    OUT_OF_ORDER = "OUT_OF_ORDER"
    MISSING_TOKEN = "MISSING_TOKEN"
    RESIDUAL_TAG = "RESIDUAL_TAG"
    RESIDUAL_TEXT = "RESIDUAL_TEXT"
    STEP_COUNT_MISMATCH = "STEP_COUNT_MISMATCH"


@dataclass(frozen=True)
class DiagnosticResult:
    code: Diag
    detail: str = ""
    step_count: int | None = None

    @property
    def valid(self) -> bool:
        return self.code is Diag.VALID


def validate_latent_prefix(tokens, plan_len: int | None, vocab: LatentVocab | None = None) -> DiagnosticResult:
    """Check that a decoded reasoning prefix is a well-formed latent scaffold.

    Criteria are checked in order: a single THOUGHT wrapper; latent tokens in
    scaffold order without repeats; no residual block tags or text; a step count
    equal to ``plan_len``. ``plan_len=None`` (unparseable plan) always fails the
    count check. Tokens after ``</THOUGHT>`` are ignored.
    """
    vocab = vocab or LatentVocab()
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    tokens = list(tokens)
    if tokens.count(THOUGHT_OPEN) != 1 or tokens.count(THOUGHT_CLOSE) != 1:
        return DiagnosticResult(Diag.WRAPPER, "need exactly one <THOUGHT>...</THOUGHT> block")
    i, j = tokens.index(THOUGHT_OPEN), tokens.index(THOUGHT_CLOSE)
    if i != 0 or j < i:
        return DiagnosticResult(Diag.WRAPPER, "<THOUGHT> must open the output and precede </THOUGHT>")
    inner = tokens[i + 1:j]

    latent = [t for t in inner if vocab.position(t) is not None]
    seen: set[str] = set()
    pos = 0
    for tok in latent:
        if tok in seen:
            return DiagnosticResult(Diag.REPEATED, f"{tok} repeated")
        seen.add(tok)
        block, slot = vocab.position(tok)
        if block * vocab.K + slot != pos:
            return DiagnosticResult(Diag.OUT_OF_ORDER, f"{tok} at latent position {pos}")
        pos += 1
    if pos % vocab.K or pos < 2 * vocab.K:
        return DiagnosticResult(Diag.MISSING_TOKEN, f"scaffold truncated after {pos} latent tokens")

    for tok in inner:
        if vocab.position(tok) is None:
            if RAW_TAG_RE.match(tok):
                return DiagnosticResult(Diag.RESIDUAL_TAG, f"raw tag {tok}")
            return DiagnosticResult(Diag.RESIDUAL_TEXT, f"non-latent token {tok!r}")

    steps = pos // vocab.K - 2
    if plan_len is None or steps != plan_len:
        return DiagnosticResult(Diag.STEP_COUNT_MISMATCH, f"{steps} step groups vs plan length {plan_len}", steps)
    return DiagnosticResult(Diag.VALID, step_count=steps)
