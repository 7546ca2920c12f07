"""Desk-scale training loops for the tabular policy: curriculum SFT and counterfactual preference alignment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .compile import (
    EOS,
    CompiledRecord,
    compile_record,
    plan_from_tokens,
    plan_tokens,
    prompt_tokens,
    record_plan,
    split_decoded,
)
from .curriculum import SCHEDULES, CurriculumConfig, global_stage, section_weights, stage_at_epoch
from .metrics import acc_at_1, latent_valid_rate, ndcg_at_k, nes
from .plan import ContextBundle, plan_from_list
from .policy import TabularPolicy
from .scaffold import LatentVocab, validate_latent_prefix
from .scdpo import LossBreakdown, ScdpoConfig, reward_shift, scdpo_grad, scdpo_loss

log = logging.getLogger(__name__)


def build_vocab(train: list[dict], extra_prompts: list[dict] = (), pairs: list[dict] = (),
                latent: LatentVocab | None = None) -> list[str]:
    """Token inventory: every stage of every training record, pair responses, eval prompts."""
    latent = latent or LatentVocab()
    toks: set[str] = set(latent.tokens)
    for rec in train:
        full = compile_record(rec, 0, latent)
        toks.update(full.prompt, full.prefix_tokens, full.json_tokens)
    for rec in extra_prompts:
        toks.update(prompt_tokens(ContextBundle.from_dict(rec["context"])))
    for pr in pairs:
        toks.update(prompt_tokens(ContextBundle.from_dict(pr["prompt"])))
        for key in ("chosen", "rejected"):
            toks.update(plan_tokens(plan_from_list(pr[key])))
    toks.add(EOS)
    return sorted(toks)


def record_loss(policy: TabularPolicy, rec: CompiledRecord) -> tuple[float, float, float]:
    """Section-normalized cross-entropy ``(L_cot, L_json, L)`` of a compiled record."""
    nll = -policy.token_logprobs(rec.prompt, rec.target)
    mask = rec.section_mask
    w = np.array(section_weights(mask))
    cot = [x for x, m in zip(nll, mask) if m == 1]
    js = [x for x, m in zip(nll, mask) if m == 2]
    l_cot = float(np.mean(cot)) if cot else 0.0
    l_json = float(np.mean(js))
    return l_cot, l_json, float(np.dot(w, nll))


def ce_grad(policy: TabularPolicy, rec: CompiledRecord):
    """Rows and gradient of the section-normalized loss w.r.t. the logits."""
    w = np.array(section_weights(rec.section_mask))
    rows, g = policy.logprob_grad(rec.prompt, rec.target, weights=w)
    return rows, -g


def ce_step(policy: TabularPolicy, rec: CompiledRecord, lr: float) -> tuple[float, float, float]:
    """One gradient-descent step on a compiled record; returns the pre-step losses."""
    losses = record_loss(policy, rec)
    if lr:
        rows, g = ce_grad(policy, rec)
        policy.apply(rows, g, -lr)
    return losses


@dataclass
class EvalReport:
    latent_valid: float | None
    acc1: float
    ndcg3: float
    nes: float
    truncated: int
    codes: dict[str, int] = field(default_factory=dict)


def decode_and_score(policy: TabularPolicy, records: list[dict], vocab: LatentVocab | None = None,
                     max_len: int = 160) -> tuple[EvalReport, list[dict]]:
    """Greedy-decode every record's prompt and score latent validity and plan metrics."""
    vocab = vocab or LatentVocab()
    diags, acc, nd, ne, trunc = [], [], [], [], 0
    codes: dict[str, int] = {}
    outputs = []
    for rec in records:
        prompt = prompt_tokens(ContextBundle.from_dict(rec["context"]))
        res = policy.greedy_decode(prompt, max_len)
        trunc += res.truncated
        prefix, plan_toks = split_decoded(res.tokens)
        pred = plan_from_tokens(plan_toks)
        truth = record_plan(rec)
        body = res.tokens[:-1] if res.tokens and res.tokens[-1] == EOS else res.tokens
        d = validate_latent_prefix(body, len(pred) if pred is not None else None, vocab)
        diags.append(d)
        codes[d.code.value] = codes.get(d.code.value, 0) + 1
        pred_intents = list(pred) if pred is not None else []
        acc.append(acc_at_1(pred_intents, list(truth)))
        nd.append(ndcg_at_k(pred_intents, list(truth), 3))
        ne.append(nes(pred_intents, list(truth)))
        outputs.append({"tokens": res.tokens, "truncated": res.truncated,
                        "plan": pred.to_list() if pred is not None else None, "diagnostic": d.code.value})
    report = EvalReport(latent_valid_rate(diags), float(np.mean(acc)), float(np.mean(nd)), float(np.mean(ne)),
                        trunc, dict(sorted(codes.items())))
    return report, outputs


def train_picd(train: list[dict], cfg: CurriculumConfig, seed: int = 0, heldout: list[dict] = (),
               schedule: str = "calr", order: int = 2, lr_scale: float = 1.0,
               latent: LatentVocab | None = None, vocab_tokens: list[str] | None = None,
               eval_every_epoch: bool = True):
    """Progressive latent-compression SFT of a fresh tabular policy.

    Each epoch compiles every record at its clamped stage, shuffles with the
    seeded RNG, and takes one gradient step per record at the scheduled LR
    (times ``lr_scale``; LLM-scale rates do nothing to a logit table).
    Returns ``(policy, rows)`` with one report dict per epoch.
    """
    latent = latent or LatentVocab()
    rng = np.random.default_rng(seed)
    vocab_tokens = vocab_tokens or build_vocab(train, heldout, latent=latent)
    policy = TabularPolicy(vocab_tokens, order=order)
    cfg_run = CurriculumConfig(**{**cfg.__dict__, "steps_per_epoch": len(train)})
    sched = SCHEDULES[schedule](cfg_run)
    plan_lens = [len(record_plan(r)) for r in train]
    report = []
    t = 0
    for e in range(cfg_run.epochs):
        g = global_stage(e, cfg_run)
        compiled = [compile_record(r, stage_at_epoch(e, cfg_run, n), latent) for r, n in zip(train, plan_lens)]
        order_idx = rng.permutation(len(compiled))
        l_cot, l_json, lrs = [], [], []
        for i in order_idx:
            lr = sched(t, g) * lr_scale
            c, j, _ = ce_step(policy, compiled[i], lr)
            l_cot.append(c)
            l_json.append(j)
            lrs.append(lr)
            t += 1
        row = {
            "epoch": e,
            "g": g,
            "lr_first": lrs[0],
            "lr_last": lrs[-1],
            "mean_L_cot": float(np.mean(l_cot)),
            "mean_L_json": float(np.mean(l_json)),
            "fully_latent_frac": float(np.mean([c.stage_b == c.B for c in compiled])),
        }
        if heldout and (eval_every_epoch or e == cfg_run.epochs - 1):
            ev, _ = decode_and_score(policy, list(heldout), latent)
            row.update(latent_valid=ev.latent_valid, acc1=ev.acc1, ndcg3=ev.ndcg3, nes=ev.nes,
                       diag_codes=ev.codes)
        log.info("picd epoch %d: %s", e, row)
        report.append(row)
    return policy, report


@dataclass(frozen=True)
class PairTokens:
    prompt: tuple[str, ...]
    chosen: tuple[str, ...]
    rejected: tuple[str, ...]
    anchor_id: str
    direction: str


def tokenize_pair(pr: dict) -> PairTokens:
    ctx = ContextBundle.from_dict(pr["prompt"])
    return PairTokens(
        tuple(prompt_tokens(ctx)),
        tuple(plan_tokens(plan_from_list(pr["chosen"])) + [EOS]),
        tuple(plan_tokens(plan_from_list(pr["rejected"])) + [EOS]),
        pr.get("anchor_id", ""),
        pr.get("direction", "x"),
    )


def sequence_logprob(policy: TabularPolicy, prompt, seq, length_normalized: bool = False) -> float:
    lp = policy.logprob(prompt, seq)
    return lp / len(seq) if length_normalized else lp


def pair_rewards(policy: TabularPolicy, ref: TabularPolicy, p: PairTokens, cfg: ScdpoConfig):
    ln = cfg.length_normalized
    lp_c = sequence_logprob(policy, p.prompt, p.chosen, ln)
    lp_r = sequence_logprob(policy, p.prompt, p.rejected, ln)
    rc = sequence_logprob(ref, p.prompt, p.chosen, ln)
    rr = sequence_logprob(ref, p.prompt, p.rejected, ln)
    return reward_shift(lp_c, rc, cfg.beta), reward_shift(lp_r, rr, cfg.beta), (lp_c - rc, lp_r - rr)


def scdpo_logit_grad(policy: TabularPolicy, ref: TabularPolicy, p: PairTokens, cfg: ScdpoConfig):
    """Loss breakdown plus rows/gradient of the total loss w.r.t. the policy logits."""
    r_plus, r_minus, _ = pair_rewards(policy, ref, p, cfg)
    loss = scdpo_loss(r_plus, r_minus, cfg)
    d_plus, d_minus = scdpo_grad(r_plus, r_minus, cfg)
    sc = cfg.beta / len(p.chosen) if cfg.length_normalized else cfg.beta
    sr = cfg.beta / len(p.rejected) if cfg.length_normalized else cfg.beta
    rows_c, g_c = policy.logprob_grad(p.prompt, p.chosen)
    rows_r, g_r = policy.logprob_grad(p.prompt, p.rejected)
    rows = np.concatenate([rows_c, rows_r])
    grad = np.concatenate([d_plus * sc * g_c, d_minus * sr * g_r])
    return loss, rows, grad


def pair_stats(policy: TabularPolicy, ref: TabularPolicy, pairs: list[PairTokens], cfg: ScdpoConfig) -> dict:
    gaps, dc, dr, totals = [], [], [], []
    for p in pairs:
        r_plus, r_minus, (d_c, d_r) = pair_rewards(policy, ref, p, cfg)
        gaps.append(r_plus - r_minus)
        dc.append(d_c)
        dr.append(d_r)
        totals.append(scdpo_loss(r_plus, r_minus, cfg).total)
    gaps_a = np.array(gaps)
    return {
        "mean_gap": float(gaps_a.mean()),
        "gap_quantiles": [float(q) for q in np.quantile(gaps_a, [0.1, 0.5, 0.9])],
        "frac_gap_in_band": float(np.mean((gaps_a >= cfg.gamma_low) & (gaps_a <= cfg.gamma_high))),
        "mean_chosen_logp_delta": float(np.mean(dc)),
        "min_chosen_logp_delta": float(np.min(dc)),
        "mean_rejected_logp_delta": float(np.mean(dr)),
        "mean_total": float(np.mean(totals)),
    }


def _mean_breakdown(items: list[LossBreakdown]) -> dict:
    keys = ("r_plus", "r_minus", "l_dpo", "l_anchor", "l_gap_low", "l_gap_high", "l_center", "total")
    return {k: math.fsum(getattr(b, k) for b in items) / len(items) for k in keys}


def interleave_by_anchor(pairs: list[PairTokens], rng: np.random.Generator) -> list[PairTokens]:
    """Shuffle anchors, keeping both directions of an anchor adjacent."""
    groups: dict[str, list[PairTokens]] = {}
    for i, p in enumerate(pairs):
        groups.setdefault(p.anchor_id or f"_{i}", []).append(p)
    keys = list(groups)
    out = []
    for k in rng.permutation(len(keys)):
        out.extend(groups[keys[k]])
    return out


def train_scdpo(policy: TabularPolicy, ref_policy: TabularPolicy, pairs: list[dict], cfg: ScdpoConfig,
                lr: float, seed: int = 0, epochs: int = 1):
    """Preference alignment of ``policy`` against the frozen ``ref_policy``.

    Plain gradient descent, one step per pair. ``policy`` is updated in place
    and returned with a report holding the mean loss breakdown and pair stats
    before and after training.
    """
    rng = np.random.default_rng(seed)
    toks = [tokenize_pair(p) for p in pairs]
    before = pair_stats(policy, ref_policy, toks, cfg)
    # rows and reference scores are fixed for the whole run; materializing the
    # rows up front is free because an all-zero row scores like a missing one
    ln = cfg.length_normalized
    cache = {}
    for p in toks:
        rc = policy.rows_for(p.prompt, p.chosen, create=True)
        rr = policy.rows_for(p.prompt, p.rejected, create=True)
        nc, nr = (len(p.chosen), len(p.rejected)) if ln else (1, 1)
        cache[id(p)] = (rc, rr, ref_policy.logprob(p.prompt, p.chosen) / nc,
                        ref_policy.logprob(p.prompt, p.rejected) / nr, nc, nr)
    seen: list[LossBreakdown] = []
    for _ in range(epochs):
        for p in interleave_by_anchor(toks, rng):
            (rows_c, ids_c), (rows_r, ids_r), ref_c, ref_r, nc, nr = cache[id(p)]
            lp_c, g_c = policy.score_rows(rows_c, ids_c, grad=True)
            lp_r, g_r = policy.score_rows(rows_r, ids_r, grad=True)
            r_plus = reward_shift(lp_c / nc, ref_c, cfg.beta)
            r_minus = reward_shift(lp_r / nr, ref_r, cfg.beta)
            seen.append(scdpo_loss(r_plus, r_minus, cfg))
            d_plus, d_minus = scdpo_grad(r_plus, r_minus, cfg)
            if lr:
                rows = np.concatenate([rows_c, rows_r])
                grad = np.concatenate([(d_plus * cfg.beta / nc) * g_c, (d_minus * cfg.beta / nr) * g_r])
                policy.apply(rows, grad, -lr)
    after = pair_stats(policy, ref_policy, toks, cfg)
    report = {"steps": len(seen), "mean_breakdown": _mean_breakdown(seen) if seen else None,
              "before": before, "after": after}
    return policy, report
