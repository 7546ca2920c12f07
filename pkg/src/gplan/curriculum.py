"""Progressive compression schedule, compression-aware LR and the section-normalized loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence


class MaskMismatch(ValueError):
    pass


class EmptyJson(ValueError):
    pass


class Section(IntEnum):
    PROMPT = 0
    COT = 1
    JSON = 2


@dataclass(frozen=True)
class CurriculumConfig:
    epochs: int = 13
    blocks_per_epoch: int = 1
    B_star: int = 9
    eta_struct: float = 5e-6
    eta_polish: float = 1e-6
    steps_per_epoch: int = 1
    # None: decay to zero at the end of the last epoch
    total_polish_steps: int | None = None

    def __post_init__(self):
        if not self.eta_struct > self.eta_polish > 0:
            raise ValueError("need eta_struct > eta_polish > 0")
        if self.B_star < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("B_star, epochs and steps_per_epoch must be >= 1")
        if self.blocks_per_epoch < 0:
            raise ValueError("blocks_per_epoch must be non-negative")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def blocks_for_sample(plan_len: int) -> int:
    """Number of latent blocks: CONTEXT + STRATEGY + one per intent."""
    if plan_len < 1:
        raise ValueError("plan_len must be >= 1")
    return 2 + plan_len


def global_stage(epoch: int, cfg: CurriculumConfig) -> int:
    """Curriculum-wide stage g at an epoch (unclamped)."""
    return epoch * cfg.blocks_per_epoch


def stage_at_epoch(epoch: int, cfg: CurriculumConfig, plan_len: int) -> int:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return min(global_stage(epoch, cfg), blocks_for_sample(plan_len))


def polish_horizon(cfg: CurriculumConfig, t_star: int) -> int:
    if cfg.total_polish_steps is not None:
        return cfg.total_polish_steps
    return max(cfg.total_steps - t_star, 1)


def lr_at_step(t: int, g: int, cfg: CurriculumConfig, t_star: int | None = None) -> float:
    """Compression-aware LR.

    ``eta_struct`` while ``g <= B_star``; afterwards ``eta_polish`` times a
    half-cosine over the polish horizon, measured from ``t_star`` (the first
    step with ``g > B_star``; defaults to ``t`` itself, i.e. the phase start).
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if g <= cfg.B_star:
        return cfg.eta_struct
    if t_star is None:
        t_star = t
    horizon = polish_horizon(cfg, t_star)
    frac = min(max(t - t_star, 0) / horizon, 1.0)
    return max(cfg.eta_polish * 0.5 * (1.0 + math.cos(math.pi * frac)), 0.0)


class CalrSchedule:
    """Stateful wrapper that records t* on the first crossing of B_star."""

    def __init__(self, cfg: CurriculumConfig):
        self.cfg = cfg
        self.t_star: int | None = None

    def __call__(self, t: int, g: int) -> float:
        if g > self.cfg.B_star and self.t_star is None:
            self.t_star = t
        return lr_at_step(t, g, self.cfg, self.t_star)


class CosineSchedule:
    """Single-phase cosine from eta_struct to zero over all epochs (ablation baseline)."""

    def __init__(self, cfg: CurriculumConfig):
        self.cfg = cfg

    def __call__(self, t: int, g: int) -> float:
        return self.cfg.eta_struct * 0.5 * (1.0 + math.cos(math.pi * t / self.cfg.total_steps))


class ConstantSchedule:
    def __init__(self, cfg: CurriculumConfig):
        self.cfg = cfg

    def __call__(self, t: int, g: int) -> float:
        return self.cfg.eta_struct


SCHEDULES = {"calr": CalrSchedule, "cosine": CosineSchedule, "constant": ConstantSchedule}


def schedule_rows(cfg: CurriculumConfig, kind: str = "calr") -> list[tuple[int, int, int, float]]:
    """(t, epoch, g, lr) for every step of the run."""
    sched = SCHEDULES[kind](cfg)
    rows = []
    for e in range(cfg.epochs):
        g = global_stage(e, cfg)
        for s in range(cfg.steps_per_epoch):
            t = e * cfg.steps_per_epoch + s
            rows.append((t, e, g, sched(t, g)))
    return rows


def section_loss(per_token_losses: Sequence[float], mask: Sequence[int]) -> tuple[float, float, float]:
    """Mean loss per section, then the two section means averaged.

    Returns ``(L_cot, L_json, L)``. PROMPT tokens are ignored; an empty COT
    section contributes 0.
    """
    if len(per_token_losses) != len(mask):
        raise MaskMismatch(f"{len(per_token_losses)} losses vs {len(mask)} mask labels")
    cot = [x for x, m in zip(per_token_losses, mask) if m == Section.COT]
    js = [x for x, m in zip(per_token_losses, mask) if m == Section.JSON]
    if not js:
        raise EmptyJson("mask has no JSON tokens")
    l_cot = math.fsum(cot) / len(cot) if cot else 0.0
    l_json = math.fsum(js) / len(js)
    return l_cot, l_json, 0.5 * (l_cot + l_json)


def section_weights(mask: Sequence[int]) -> list[float]:
    """Per-token weights w such that sum(w * loss) equals the section-normalized loss."""
    n_cot = sum(1 for m in mask if m == Section.COT)
    n_json = sum(1 for m in mask if m == Section.JSON)
    if not n_json:
        raise EmptyJson("mask has no JSON tokens")
    out = []
    for m in mask:
        if m == Section.COT:
            out.append(0.5 / n_cot)
        elif m == Section.JSON:
            out.append(0.5 / n_json)
        else:
            out.append(0.0)
    return out


def token_mean_loss(per_token_losses: Sequence[float], mask: Sequence[int]) -> float:
    """Plain token-level mean over COT and JSON tokens (the unnormalized baseline)."""
    vals = [x for x, m in zip(per_token_losses, mask) if m != Section.PROMPT]
    return math.fsum(vals) / len(vals)
