"""MULT-4 vs single-task (IND) validation scores, the toy analogue of the
multi-task results table.

    python3 scripts/multitask_vs_single.py [--seed 0] [--runs runs/acceptance]
"""

import argparse
from pathlib import Path

from omninet import experiments as ex
from omninet.cnp import count_parameters
from omninet.tasks import TASK_NAMES

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--runs", default=str(ROOT / "runs" / "acceptance"))
    args = ap.parse_args()

    mult = ex.train_run(ex.recipe_spec(TASK_NAMES, args.seed), cache_dir=args.runs)
    print("task\tIND\tMULT-4\tparams(IND)")
    total_ind = 0
    for name in TASK_NAMES:
        ind = ex.train_run(ex.recipe_spec((name,), args.seed), cache_dir=args.runs)
        n = count_parameters(ind.model)
        total_ind += n
        print(f"{name}\t{ex.primary(ind.metrics, name):.2f}\t{ex.primary(mult.metrics, name):.2f}\t{n}")
    print(f"parameters\t{total_ind}\t{count_parameters(mult.model)}")


if __name__ == "__main__":
    main()
