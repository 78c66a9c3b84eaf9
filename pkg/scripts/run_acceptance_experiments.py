"""Train (or reuse) every run the acceptance suite needs.

    python3 scripts/run_acceptance_experiments.py [--runs runs/acceptance]

Runs are cached by configuration hash, so this is safe to interrupt and rerun.
The test suite trains missing runs itself; running this first just moves the
~30 CPU-minutes out of pytest.
"""

import argparse
import time
from pathlib import Path

from omninet import experiments as ex

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--runs", default=str(ROOT / "runs" / "acceptance"))
    args = ap.parse_args()
    t0 = time.time()
    for spec in ex.acceptance_specs():
        r = ex.train_run(spec, cache_dir=args.runs)
        scores = "  ".join(f"{n}={ex.primary(r.metrics, n):.1f}" for n in spec.tasks)
        tag = "cached" if r.reused else f"{r.seconds:.0f}s"
        print(f"{spec.key():60s} {spec.ablate:17s} {scores}  ({tag})", flush=True)
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
