"""Ablation table over seeds: full model vs no-spatial-cache vs no-link-array.

Eval-time ablations switch a component off in the trained MULT-4 model.
The train-time row trains single-task captioning with no spatial cache.

    python3 scripts/ablation_study.py [--seeds 0 1 2] [--runs runs/acceptance]
"""

import argparse
from pathlib import Path

import numpy as np

from omninet import experiments as ex
from omninet.tasks import TASK_NAMES, chance_level, make_task

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=list(ex.ACCEPTANCE_SEEDS))
    ap.add_argument("--runs", default=str(ROOT / "runs" / "acceptance"))
    args = ap.parse_args()

    tables = []
    for seed in args.seeds:
        model = ex.train_run(ex.recipe_spec(TASK_NAMES, seed), cache_dir=args.runs).model
        table = ex.ablation_table(model, TASK_NAMES)
        print(f"# seed {seed}")
        print(ex.format_table(table), end="")
        tables.append(table)

    print("# mean over seeds, relative drop vs full in brackets")
    print("\t".join(["ablation", *TASK_NAMES]))
    for ab in ex.ABLATIONS:
        cells = []
        for n in TASK_NAMES:
            full = np.mean([t["none"][n] for t in tables])
            val = np.mean([t[ab][n] for t in tables])
            cells.append(f"{val:.2f} ({100 * ex.relative_drop(full, val):+.1f}%)")
        print("\t".join([ab, *cells]))

    chance = chance_level(make_task("captioning"))
    trained = [ex.train_run(ex.recipe_spec(("captioning",), s, ablate="no-spatial-cache"), cache_dir=args.runs)
               for s in args.seeds]
    scores = ", ".join(f"{ex.primary(r.metrics, 'captioning'):.1f}" for r in trained)
    print(f"# captioning trained without spatial cache: exact match {scores} (chance {chance:.1f})")


if __name__ == "__main__":
    main()
