"""Offline evaluation metrics: Acc@1, NDCG@k, normalized edit similarity, latent-valid rate."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .plan import Intent


@dataclass(frozen=True)
class EditCosts:
    insert: float = 1.0
    delete: float = 1.0
    tool_substitution: float = 1.0
    param_substitution: float = 0.3

    def __post_init__(self):
        if min(self.insert, self.delete, self.tool_substitution, self.param_substitution) <= 0:
            raise ValueError("edit costs must be positive")
        if self.param_substitution > self.tool_substitution:
            raise ValueError("param_substitution must not exceed tool_substitution")

    def substitution(self, a: Intent, b: Intent) -> float:
        if a.tool != b.tool:
            return self.tool_substitution
        if a.params != b.params:
            return self.param_substitution
        return 0.0


DEFAULT_COSTS = EditCosts()


def edit_distance(pred: Sequence[Intent], truth: Sequence[Intent], costs: EditCosts = DEFAULT_COSTS) -> float:
    """Weighted Levenshtein distance between two intent sequences."""
    pred, truth = list(pred), list(truth)
    prev = [j * costs.insert for j in range(len(truth) + 1)]
    for i in range(1, len(pred) + 1):
        cur = [i * costs.delete] + [0.0] * len(truth)
        for j in range(1, len(truth) + 1):
            cur[j] = min(
                prev[j] + costs.delete,
                cur[j - 1] + costs.insert,
                prev[j - 1] + costs.substitution(pred[i - 1], truth[j - 1]),
            )
        prev = cur
    return prev[-1]


def nes(pred: Sequence[Intent], truth: Sequence[Intent], costs: EditCosts = DEFAULT_COSTS) -> float:
    """Normalized edit similarity, 1 - D / max(|pred|, |truth|)."""
    denom = max(len(pred), len(truth))
    if denom == 0:
        return 1.0
    return 1.0 - edit_distance(pred, truth, costs) / denom


def acc_at_1(pred: Sequence[Intent], truth: Sequence[Intent], strict: bool = False) -> int:
    if not truth:
        raise ValueError("truth must be nonempty")
    if not pred:
        return 0
    if strict:
        return int(pred[0] == truth[0])
    return int(pred[0].tool == truth[0].tool)


def ndcg_at_k(pred: Sequence[Intent], truth: Sequence[Intent], k: int = 3) -> float:
    """Binary-relevance NDCG@k at tool level.

    A predicted tool is relevant if it is still available in the truth's tool
    multiset; each truth tool can be matched once, front to back.
    """
    if not truth:
        raise ValueError("truth must be nonempty")
    pool = Counter(a.tool for a in truth)
    dcg = 0.0
    for i, a in enumerate(list(pred)[:k]):
        if pool[a.tool] > 0:
            pool[a.tool] -= 1
            dcg += 1.0 / math.log2(i + 2)
    ideal = min(k, len(truth))
    idcg = sum(1.0 / math.log2(i + 2) for i in range(ideal))
    return dcg / idcg


def latent_valid_rate(diagnostics: Iterable) -> float | None:
    """Fraction of valid diagnostics; None when there is nothing to score."""
    diags = list(diagnostics)
    if not diags:
        return None
    return sum(1 for d in diags if d.valid) / len(diags)
