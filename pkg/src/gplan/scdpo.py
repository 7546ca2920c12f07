"""Counterfactual preference pairs and the reference-anchored preference loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

from .plan import ContextBundle, Plan

ST_FIELDS = ("time", "location", "city", "is_weekend", "is_holiday")


class DegeneratePair(ValueError):
    pass


class NonFinite(ValueError):
    pass


@dataclass(frozen=True)
class CounterfactualAnchor:
    x: ContextBundle
    x_prime: ContextBundle
    y_x: Plan
    y_xprime: Plan
    anchor_id: str = ""

    def __post_init__(self):
        if self.x.user != self.x_prime.user or self.x.history != self.x_prime.history:
            raise ValueError("anchor contexts must share user and history")
        if not changed_st_fields(self.x, self.x_prime):
            raise ValueError("anchor contexts must differ in at least one spatiotemporal field")

    def swapped(self) -> "CounterfactualAnchor":
        return CounterfactualAnchor(self.x_prime, self.x, self.y_xprime, self.y_x, self.anchor_id)


def changed_st_fields(x: ContextBundle, x_prime: ContextBundle) -> list[str]:
    return [f for f in ST_FIELDS if getattr(x.st, f) != getattr(x_prime.st, f)]


@dataclass(frozen=True)
class PreferencePair:
    prompt: ContextBundle
    chosen: Plan
    rejected: Plan
    direction: str = "x"
    anchor_id: str = ""

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise DegeneratePair("chosen and rejected plans are identical")


def materialize_pairs(anchor: CounterfactualAnchor) -> tuple[PreferencePair, PreferencePair]:
    """Both directions of an anchor: x prefers y_x, x' prefers y_x'."""
    if anchor.y_x == anchor.y_xprime:
        raise DegeneratePair(f"anchor {anchor.anchor_id!r}: both contexts map to the same plan")
    return (
        PreferencePair(anchor.x, anchor.y_x, anchor.y_xprime, "x", anchor.anchor_id),
        PreferencePair(anchor.x_prime, anchor.y_xprime, anchor.y_x, "x_prime", anchor.anchor_id),
    )


@dataclass(frozen=True)
class ScdpoConfig:
    beta: float = 0.20
    delta: float = 0.0
    gamma_low: float = 0.10
    gamma_high: float = 0.20
    m: float = 0.0
    lambda_a: float = 5.0
    lambda_gl: float = 10.0
    lambda_gh: float = 2.0
    lambda_c: float = 3.0
    length_normalized: bool = False
    # LLM-scale optimizer settings, kept for config fidelity only
    lr: float = 2e-7
    warmup_ratio: float = 0.03

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.gamma_low > self.gamma_high:
            raise ValueError("gamma_low must not exceed gamma_high")
        if min(self.lambda_a, self.lambda_gl, self.lambda_gh, self.lambda_c) < 0:
            raise ValueError("loss weights must be non-negative")

    def vanilla(self) -> "ScdpoConfig":
        """Same config with every regularizer switched off (plain DPO)."""
        d = asdict(self)
        d.update(lambda_a=0.0, lambda_gl=0.0, lambda_gh=0.0, lambda_c=0.0)
        return ScdpoConfig(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    r_plus: float
    r_minus: float
    l_dpo: float
    l_anchor: float
    l_gap_low: float
    l_gap_high: float
    l_center: float
    total: float

    @property
    def gap(self) -> float:
        return self.r_plus - self.r_minus


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise NonFinite(f"non-finite input {v}")


def log_sigmoid(z: float) -> float:
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def reward_shift(logp_policy: float, logp_ref: float, beta: float) -> float:
    _check_finite(logp_policy, logp_ref, beta)
    return beta * (logp_policy - logp_ref)


def scdpo_loss(r_plus: float, r_minus: float, cfg: ScdpoConfig = ScdpoConfig()) -> LossBreakdown:
    _check_finite(r_plus, r_minus)
    gap = r_plus - r_minus
    center = 0.5 * (r_plus + r_minus)
    l_dpo = -log_sigmoid(gap)
    l_anchor = max(0.0, cfg.delta - r_plus) ** 2
    l_gap_low = max(0.0, cfg.gamma_low - gap) ** 2
    l_gap_high = max(0.0, gap - cfg.gamma_high) ** 2
    l_center = (center - cfg.m) ** 2
    total = (l_dpo + cfg.lambda_a * l_anchor + cfg.lambda_gl * l_gap_low
             + cfg.lambda_gh * l_gap_high + cfg.lambda_c * l_center)
    return LossBreakdown(r_plus, r_minus, l_dpo, l_anchor, l_gap_low, l_gap_high, l_center, total)


def scdpo_grad(r_plus: float, r_minus: float, cfg: ScdpoConfig = ScdpoConfig()) -> tuple[float, float]:
    """Partial derivatives of the total loss w.r.t. ``r_plus`` and ``r_minus``.

    Hinge terms use subgradient 0 at their kinks.
    """
    _check_finite(r_plus, r_minus)
    gap = r_plus - r_minus
    center = 0.5 * (r_plus + r_minus)
    d_gap = sigmoid(gap) - 1.0  # d l_dpo / d gap
    if gap < cfg.gamma_low:
        d_gap += cfg.lambda_gl * -2.0 * (cfg.gamma_low - gap)
    if gap > cfg.gamma_high:
        d_gap += cfg.lambda_gh * 2.0 * (gap - cfg.gamma_high)
    d_center = cfg.lambda_c * 2.0 * (center - cfg.m)
    d_plus = d_gap + 0.5 * d_center
    d_minus = -d_gap + 0.5 * d_center
    if r_plus < cfg.delta:
        d_plus += cfg.lambda_a * -2.0 * (cfg.delta - r_plus)
    return d_plus, d_minus
