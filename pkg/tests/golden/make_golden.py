"""Regenerate scaffold_golden.json with a regex-only compressor.

The compressor below does not use the package's scaffold code; only the
teacher CoTs come from the generator. Run from the repository root:

    python tests/golden/make_golden.py
"""

import json
import random
import re
from pathlib import Path

from gplan.synth import NoTemplateMatch, generate_context, match_template, simulate_teacher

BLOCK = re.compile(r"<(CONTEXT|STRATEGY|STEP_(\d+))>.*?</\1>", re.S)
N_COTS = 200
SEED = 2024


def latent_group(j, k=3):
    names = "ABC"[:k]
    if j == 0:
        return [f"<THOUGHT_CONTEXT_{c}>" for c in names]
    if j == 1:
        return [f"<THOUGHT_STRATEGY_{c}>" for c in names]
    return [f"<T_{j - 1}_{c}>" for c in names]


def oracle_stages(text):
    blocks = list(BLOCK.finditer(text))
    out = [text]
    for b in range(1, len(blocks) + 1):
        latent = " ".join(tok for j in range(b) for tok in latent_group(j))
        parts = ["<THOUGHT>", latent]
        if b < len(blocks):
            parts.append(text[blocks[b].start():blocks[-1].end()])
        parts.append("</THOUGHT>")
        out.append(" ".join(parts))
    return out


def teacher_cots(n, seed):
    rng = random.Random(seed)
    cots = []
    while len(cots) < n:
        ctx = generate_context(rng)
        try:
            match_template(ctx)
        except NoTemplateMatch:
            continue
        cot, plan = simulate_teacher(ctx, seed=rng)
        cots.append({"cot": cot.render(), "plan_len": len(plan)})
    return cots


def main():
    cases = [{**c, "stages": oracle_stages(c["cot"])} for c in teacher_cots(N_COTS, SEED)]
    path = Path(__file__).with_name("scaffold_golden.json")
    path.write_text(json.dumps({"seed": SEED, "cases": cases}, indent=1) + "\n")
    print(f"wrote {len(cases)} cases to {path}")


if __name__ == "__main__":
    main()
