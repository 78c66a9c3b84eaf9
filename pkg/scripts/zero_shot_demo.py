"""Caption toy videos with the image-captioning head of a MULT-4 model.

    python3 scripts/zero_shot_demo.py [--checkpoint runs/.../model.ckpt] [-n 500]
"""

import argparse
from pathlib import Path

from omninet import experiments as ex
from omninet.cnp import load_checkpoint
from omninet.tasks import TASK_NAMES

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", help="defaults to the cached MULT-4 seed-0 run")
    ap.add_argument("-n", type=int, default=500)
    ap.add_argument("--runs", default=str(ROOT / "runs" / "acceptance"))
    args = ap.parse_args()

    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = ex.train_run(ex.recipe_spec(TASK_NAMES, 0), cache_dir=args.runs).model
    r = ex.zero_shot_report(model, n=args.n)
    for row in r["examples"]:
        print(f"{row['clip']:28s} -> {row['caption']}")
    print(f"color mentioned  {r['color_rate']:.1f}%  (random captions {r['baseline_color_rate']:.1f}%)")
    print(f"shape mentioned  {r['shape_rate']:.1f}%  (random captions {r['baseline_shape_rate']:.1f}%)")
    print("temporal attention per frame: " + " ".join(f"{m:.3f}" for m in r["frame_gate_mass"]))


if __name__ == "__main__":
    main()
