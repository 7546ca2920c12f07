"""Command-line entry point: synth, filter, compile, train-picd, train-dpo, eval, diagnose, schedule-dump.

Exit codes: 0 success, 1 validation failure, 2 config or I/O error (argparse
usage errors also exit 2).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

from . import __version__
from .compile import compile_record, plan_from_tokens, split_decoded
from .curriculum import SCHEDULES, CurriculumConfig, schedule_rows
from .filter import filter_dataset
from .metrics import EditCosts, acc_at_1, latent_valid_rate, ndcg_at_k, nes
from .plan import FormatError, ToolLibrary, parse_plan, plan_from_list
from .policy import TabularPolicy
from .scaffold import LatentVocab, tokenize, validate_latent_prefix
from .scdpo import ScdpoConfig
from .synth import build_dataset, corrupt_records, default_library, read_jsonl, write_jsonl
from .training import build_vocab, decode_and_score, train_picd, train_scdpo

log = logging.getLogger("gplan")

EXIT_OK, EXIT_INVALID, EXIT_CONFIG = 0, 1, 2

# reserved for externally supplied judge scores; never computed here
JUDGE_FIELDS = ("judge_flow", "judge_logic", "judge_st")


class ConfigError(Exception):
    pass


def effective_seed(args_seed: int) -> int:
    env = os.environ.get("GPLAN_SEED")
    if env is None:
        return args_seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"GPLAN_SEED must be an integer, got {env!r}") from None


def config_hash(config: dict[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# output locations do not affect results and are left out of the hash;
# inputs are identified by content rather than by path
OUTPUT_ARGS = {"out", "report", "rejects"}
INPUT_ARGS = {"inp", "train", "heldout", "pairs", "policy", "truth", "pred", "library"}


def _input_digest(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        return f"missing:{path}"
    if p.suffix == ".npz":
        # zip members carry timestamps; the policy fingerprint does not
        return "policy:" + TabularPolicy.load(p).fingerprint()
    return "sha256:" + hashlib.sha256(p.read_bytes()).hexdigest()


def _run_config(args: argparse.Namespace) -> dict[str, Any]:
    outputs = set(OUTPUT_ARGS)
    if args.command == "eval" and args.policy:
        outputs.add("pred")
    cfg: dict[str, Any] = {"command": args.command, "version": __version__}
    for k, v in vars(args).items():
        if k in ("func", "verbose", "command") or k in outputs:
            continue
        cfg[k] = _input_digest(v) if k in INPUT_ARGS and v else v
    return cfg


def dump_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _provenance(args) -> dict[str, Any]:
    cfg = _run_config(args)
    return {"config_hash": config_hash(cfg), "seed": args.seed}


def _load_library(path: str | None) -> ToolLibrary:
    return ToolLibrary.load(path) if path else default_library()


def _read(path: str) -> list[dict]:
    try:
        return read_jsonl(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSONL ({exc})") from None


# -- subcommands ----------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(args)
    library = default_library()
    train, test, pairs = build_dataset(args.n, args.seed, library=library)
    manifest = {**prov, "n": args.n, "train": len(train), "test": len(test), "pairs": len(pairs)}
    if args.corrupt:
        train, planted = corrupt_records(train, args.corrupt, args.seed, library)
        write_jsonl(out / "planted.jsonl", planted)
        manifest.update(corrupt=args.corrupt, planted=len(planted))
    write_jsonl(out / "train.jsonl", train)
    write_jsonl(out / "test.jsonl", test)
    write_jsonl(out / "pairs.jsonl", pairs)
    (out / "tools.json").write_text(library.to_json())
    dump_json(out / "manifest.json", manifest)
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


def cmd_filter(args) -> int:
    records = _read(args.inp)
    library = _load_library(args.library)
    kept, rejected, rate = filter_dataset(records, library)
    write_jsonl(args.out, kept)
    if args.rejects:
        write_jsonl(args.rejects, [{**rec, "verdict": v.to_dict()} for rec, v in rejected])
    by_tier: dict[str, int] = {}
    for _, v in rejected:
        by_tier[v.tier] = by_tier.get(v.tier, 0) + 1
    summary = {**_provenance(args), "total": len(records), "kept": len(kept),
               "removal_rate": rate, "rejected_by_tier": by_tier}
    if args.report:
        dump_json(args.report, summary)
    print(json.dumps(summary, sort_keys=True))
    if args.max_removal is not None and rate > args.max_removal:
        log.error("removal rate %.4f exceeds gate %.4f", rate, args.max_removal)
        return EXIT_INVALID
    return EXIT_OK


def cmd_compile(args) -> int:
    latent = LatentVocab()
    out = []
    for rec in _read(args.inp):
        try:
            out.append(compile_record(rec, args.stage, latent).to_dict())
        except (ValueError, KeyError) as exc:
            log.error("cannot compile record: %s", exc)
            return EXIT_INVALID
    write_jsonl(args.out, out)
    return EXIT_OK


def _curriculum(args) -> CurriculumConfig:
    try:
        return CurriculumConfig(epochs=args.epochs, blocks_per_epoch=args.blocks_per_epoch, B_star=args.b_star,
                                eta_struct=args.eta_struct, eta_polish=args.eta_polish,
                                steps_per_epoch=getattr(args, "steps_per_epoch", 1))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_schedule_dump(args) -> int:
    rows = schedule_rows(_curriculum(args), args.kind)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "e", "g", "lr"])
        for t, e, g, lr in rows:
            w.writerow([t, e, g, repr(lr)])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_train_picd(args) -> int:
    train = _read(args.train)
    heldout = _read(args.heldout) if args.heldout else []
    pairs = _read(args.pairs) if args.pairs else []
    prov = _provenance(args)
    vocab = build_vocab(train, heldout, pairs)
    policy, rows = train_picd(train, _curriculum(args), seed=args.seed, heldout=heldout,
                              schedule=args.schedule, order=args.order, lr_scale=args.lr_scale,
                              vocab_tokens=vocab, eval_every_epoch=not args.final_eval_only)
    policy.save(args.out, prov["config_hash"])
    if args.report:
        keys = ["epoch", "g", "lr_first", "lr_last", "mean_L_cot", "mean_L_json", "fully_latent_frac",
                "latent_valid", "acc1", "ndcg3", "nes"]
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys + ["config_hash", "seed"])
            for r in rows:
                w.writerow([r.get(k, "") for k in keys] + [prov["config_hash"], prov["seed"]])
    print(json.dumps({**prov, "final": rows[-1]}, sort_keys=True))
    return EXIT_OK


def cmd_train_dpo(args) -> int:
    policy = TabularPolicy.load(args.policy)
    ref = policy.copy()
    pairs = _read(args.pairs)
    try:
        cfg = ScdpoConfig(beta=args.beta, lambda_a=args.lambda_a, lambda_gl=args.lambda_gl,
                          lambda_gh=args.lambda_gh, lambda_c=args.lambda_c,
                          length_normalized=args.length_normalized)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.vanilla:
        cfg = cfg.vanilla()
    prov = _provenance(args)
    policy, report = train_scdpo(policy, ref, pairs, cfg, lr=args.lr, seed=args.seed, epochs=args.epochs)
    policy.save(args.out, prov["config_hash"])
    out = {**prov, "scdpo": cfg.to_dict(), **report}
    if args.report:
        dump_json(args.report, out)
    print(json.dumps(out["after"], sort_keys=True))
    return EXIT_OK


def _pred_plan(rec: dict):
    """Predicted plan of an eval record: ``plan`` (list or text), else decoded ``tokens``."""
    plan = rec.get("plan")
    if isinstance(plan, list):
        return plan_from_list(plan)
    if isinstance(plan, str):
        try:
            return parse_plan(plan)
        except FormatError:
            return None
    if rec.get("tokens") is not None:
        return plan_from_tokens(split_decoded(rec["tokens"])[1])
    return None


def _prefix_tokens(rec: dict):
    if rec.get("tokens") is not None:
        toks = list(rec["tokens"])
        return toks[:-1] if toks and toks[-1] == "<EOS>" else toks
    if isinstance(rec.get("output"), str):
        return tokenize(rec["output"])
    return None


def evaluate(preds: list[dict], truths: list[dict], strict: bool = False,
             costs: EditCosts = EditCosts()) -> dict[str, Any]:
    if len(preds) != len(truths):
        raise ConfigError(f"{len(preds)} predictions for {len(truths)} references")
    acc, nd, ne, diags = [], [], [], []
    for p, t in zip(preds, truths):
        truth = list(_pred_plan(t) or [])
        plan = _pred_plan(p)
        pred = list(plan) if plan is not None else []
        acc.append(acc_at_1(pred, truth, strict=strict))
        nd.append(ndcg_at_k(pred, truth, 3))
        ne.append(nes(pred, truth, costs))
        toks = _prefix_tokens(p)
        if toks is not None:
            diags.append(validate_latent_prefix(toks, len(plan) if plan is not None else None))
    n = max(len(preds), 1)
    report: dict[str, Any] = {
        "n": len(preds),
        "acc1": sum(acc) / n,
        "ndcg3": sum(nd) / n,
        "nes_mean": sum(ne) / n,
        "latent_valid": latent_valid_rate(diags),
        "strict_acc1": strict,
    }
    report.update({k: None for k in JUDGE_FIELDS})
    return report


def cmd_eval(args) -> int:
    truths = _read(args.truth)
    if args.policy:
        policy = TabularPolicy.load(args.policy)
        _, outputs = decode_and_score(policy, truths)
        preds = [{"tokens": o["tokens"], "plan": o["plan"]} for o in outputs]
        if args.pred:
            write_jsonl(args.pred, preds)
    elif args.pred:
        preds = _read(args.pred)
    else:
        raise ConfigError("eval needs --pred or --policy")
    report = {**_provenance(args), **evaluate(preds, truths, args.strict)}
    if args.report:
        dump_json(args.report, report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    rows, diags = [], []
    for rec in _read(args.inp):
        toks = _prefix_tokens(rec)
        if toks is None:
            raise ConfigError("diagnose records need 'tokens' or 'output'")
        plan = _pred_plan(rec)
        d = validate_latent_prefix(toks, len(plan) if plan is not None else None)
        diags.append(d)
        rows.append({"code": d.code.value, "detail": d.detail, "step_count": d.step_count})
    counts: dict[str, int] = {}
    for r in rows:
        counts[r["code"]] = counts.get(r["code"], 0) + 1
    report = {**_provenance(args), "latent_valid": latent_valid_rate(diags), "codes": counts}
    if args.out:
        write_jsonl(args.out, rows)
    if args.report:
        dump_json(args.report, report)
    print(json.dumps(report, sort_keys=True))
    if args.fail_on_invalid and any(not d.valid for d in diags):
        return EXIT_INVALID
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _add_curriculum_flags(p, with_steps: bool):
    p.add_argument("--epochs", type=int, default=13, help="number of epochs N")
    p.add_argument("--blocks-per-epoch", type=int, default=1, help="latent blocks added per epoch")
    p.add_argument("--b-star", type=int, default=9, help="global stage at which the LR switches phase")
    p.add_argument("--eta-struct", type=float, default=5e-6, help="constant LR during structure acquisition")
    p.add_argument("--eta-polish", type=float, default=1e-6, help="starting LR of the cosine polish phase")
    if with_steps:
        p.add_argument("--steps-per-epoch", type=int, default=1, help="optimizer steps per epoch")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gplan", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=0, help="RNG seed (GPLAN_SEED overrides)")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate train/test/pair JSONL files")
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--corrupt", type=float, default=0.0,
                   help="fraction of train records to corrupt; planted violations go to planted.jsonl")

    p = add("filter", cmd_filter, "three-tier plan filter")
    p.add_argument("--in", dest="inp", required=True, help="input JSONL")
    p.add_argument("--out", required=True, help="kept records JSONL")
    p.add_argument("--rejects", help="rejected records with inline verdicts")
    p.add_argument("--library", help="tool library JSON (default: built-in)")
    p.add_argument("--report", help="summary JSON")
    p.add_argument("--max-removal", type=float, default=None,
                   help="exit 1 if the removal rate exceeds this value")

    p = add("compile", cmd_compile, "compile records at a curriculum stage")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, default=0, help="latent blocks b (clamped per record)")

    p = add("schedule-dump", cmd_schedule_dump, "write the LR schedule as CSV (t,e,g,lr)")
    _add_curriculum_flags(p, with_steps=True)
    p.add_argument("--kind", choices=sorted(SCHEDULES), default="calr")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = add("train-picd", cmd_train_picd, "progressive latent-compression SFT of a tabular policy")
    _add_curriculum_flags(p, with_steps=False)
    p.add_argument("--train", required=True)
    p.add_argument("--heldout", help="records for greedy-decode evaluation")
    p.add_argument("--pairs", help="pair file whose tokens should be in the vocabulary")
    p.add_argument("--schedule", choices=sorted(SCHEDULES), default="calr")
    p.add_argument("--order", type=int, choices=(1, 2), default=2, help="policy context length")
    p.add_argument("--lr-scale", type=float, default=1e6, help="multiplier on the scheduled LR")
    p.add_argument("--final-eval-only", action="store_true", help="evaluate only after the last epoch")
    p.add_argument("--out", required=True, help="checkpoint (.npz)")
    p.add_argument("--report", help="per-epoch CSV")

    p = add("train-dpo", cmd_train_dpo, "counterfactual preference alignment")
    p.add_argument("--policy", required=True, help="input checkpoint; also the frozen reference")
    p.add_argument("--pairs", required=True)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--lambda-a", type=float, default=5.0)
    p.add_argument("--lambda-gl", type=float, default=10.0)
    p.add_argument("--lambda-gh", type=float, default=2.0)
    p.add_argument("--lambda-c", type=float, default=3.0)
    p.add_argument("--vanilla", action="store_true", help="zero all regularizer weights")
    p.add_argument("--length-normalized", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="JSON report")

    p = add("eval", cmd_eval, "plan metrics against references")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", help="predictions JSONL (written when --policy is given)")
    p.add_argument("--policy", help="decode predictions from this checkpoint")
    p.add_argument("--strict", action="store_true", help="Acc@1 compares tool and params")
    p.add_argument("--report", help="JSON report")

    p = add("diagnose", cmd_diagnose, "latent-prefix diagnostics for decoded outputs")
    p.add_argument("--in", dest="inp", required=True, help="JSONL with 'tokens' or 'output'")
    p.add_argument("--out", help="per-record diagnostics JSONL")
    p.add_argument("--report", help="summary JSON")
    p.add_argument("--fail-on-invalid", action="store_true", help="exit 1 if any output is invalid")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.seed = effective_seed(args.seed)
        return args.func(args)
    except ConfigError as exc:
        print(f"gplan: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, KeyError, ValueError) as exc:
        print(f"gplan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
