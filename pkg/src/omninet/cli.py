"""Command-line entry point.

    omninet train     --tasks all4 --steps 2000 --seed 0 --out runs/mult4
    omninet evaluate  --checkpoint runs/mult4/model.ckpt [--ablate no-link-array]
    omninet ablate    --checkpoint runs/mult4/model.ckpt
    omninet gradcheck
    omninet inspect   --task vqa --index 3 [--dump-trace]
    omninet zeroshot  --checkpoint runs/mult4/model.ckpt

Settings resolve as: command-line flag, then ``--config`` file (``key=value``
lines, ``#`` comments), then the built-in default. Exit codes: 0 success,
1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import torch

from . import autodiff as ad
from . import experiments as ex
from .cnp import PRESETS, count_parameters, load_checkpoint
from .errors import ContractError
from .tasks import SPLITS, TASK_NAMES, make_batch, make_task
from .trainer import MODES, encode_batch, evaluate

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2
GRAD_TOL = 1e-4

DEFAULTS = {
    "tasks": "all4",
    "steps": 2000,
    "seed": 0,
    "mode": "sequential",
    "ablate": "none",
    "preset": "toy",
    "out": "runs/latest",
    "checkpoint": None,
    "precision": "float32",
    "dropout": 0.0,
    "lr_factor": ex.RECIPE["lr_factor"],
    "batch_size": 32,
    "eval_limit": None,
    "split": "val",
}
CASTS = {"steps": int, "seed": int, "dropout": float, "lr_factor": float, "batch_size": int, "eval_limit": int}


class UsageError(Exception):
    pass


def parse_tasks(text: str) -> tuple[str, ...]:
    if text in ("all", "all4"):
        return TASK_NAMES
    names = tuple(t for t in text.split(",") if t)
    bad = [t for t in names if t not in TASK_NAMES]
    if bad or not names:
        raise UsageError(f"unknown task(s) {bad or text!r}; choose from {', '.join(TASK_NAMES)} or all4")
    return names


def read_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in DEFAULTS:
            raise UsageError(f"{path}:{n}: expected key=value with key in {sorted(DEFAULTS)}")
        values[key] = value.strip()
    return values


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags > config file > defaults, for the keys this command accepts."""
    from_file = read_config_file(args.config) if args.config else {}
    out = {}
    for key, default in DEFAULTS.items():
        if not hasattr(args, key):
            if key in from_file and key == "ablate" and from_file[key] != "none":
                raise UsageError(f"ablation flags are only valid for train and evaluate, not {args.command}")
            continue
        value = getattr(args, key)
        if value is None and key in from_file:
            raw = from_file[key]
            try:
                value = CASTS.get(key, str)(raw)
            except ValueError:
                raise UsageError(f"config value {key}={raw!r} is not a valid {CASTS[key].__name__}") from None
        out[key] = default if value is None else value
    if "mode" in out and out["mode"] not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    if "ablate" in out and out["ablate"] not in ex.ABLATIONS:
        raise UsageError(f"ablate must be one of {ex.ABLATIONS}")
    if "preset" in out and out["preset"] not in PRESETS:
        raise UsageError(f"preset must be one of {sorted(PRESETS)}")
    if "precision" in out and out["precision"] not in ad.DTYPES:
        raise UsageError(f"precision must be one of {sorted(ad.DTYPES)}")
    if "split" in out and out["split"] not in SPLITS:
        raise UsageError(f"split must be one of {SPLITS}")
    return out


def _load(checkpoint: str | None):
    if not checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    try:
        return load_checkpoint(checkpoint)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _print_metrics(metrics: dict[str, dict[str, float]]) -> None:
    for task, values in metrics.items():
        print(task + "\t" + "\t".join(f"{k}={v:.4f}" for k, v in values.items()))


# ---------------------------------------------------------------------------
# Commands

def cmd_train(args: argparse.Namespace) -> int:
    c = resolve(args)
    if c["preset"] == "paper-base" and not torch.cuda.is_available() and not args.allow_cpu_paper_base:
        raise UsageError("paper-base preset refuses to train on CPU; pass --allow-cpu-paper-base to override")
    spec = ex.RunSpec(
        tasks=parse_tasks(c["tasks"]), steps=c["steps"], seed=c["seed"], mode=c["mode"], preset=c["preset"],
        dropout=c["dropout"], precision=c["precision"], ablate=c["ablate"], batch_size=c["batch_size"],
        eval_limit=c["eval_limit"], lr_factor=c["lr_factor"],
    )
    if (Path(c["out"]) / "run.json").exists():
        (Path(c["out"]) / "run.json").unlink()  # an explicit train always retrains
    result = ex.train_run(spec, out_dir=c["out"])
    _print_metrics(result.metrics)
    print(f"wrote {Path(c['out']) / 'model.ckpt'} and {Path(c['out']) / 'metrics.tsv'} ({result.seconds:.1f}s)")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    c = resolve(args)
    model = _load(c["checkpoint"])
    registered = tuple(h.name for h in model.cfg.tasks)
    names = registered if args.tasks is None else parse_tasks(c["tasks"])
    missing = [n for n in names if n not in registered]
    if missing:
        raise UsageError(f"checkpoint has no head for {missing}")
    with ex.ablated(model, c["ablate"]):
        metrics = {n: evaluate(model, make_task(n), c["split"], c["eval_limit"]) for n in names}
    _print_metrics(metrics)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    c = resolve(args)
    if c["checkpoint"]:
        model = _load(c["checkpoint"])
    else:
        spec = ex.RunSpec(tasks=parse_tasks(c["tasks"]), steps=c["steps"], seed=c["seed"], preset=c["preset"],
                          dropout=c["dropout"], precision=c["precision"], batch_size=c["batch_size"],
                          lr_factor=c["lr_factor"])
        model = ex.train_run(spec, out_dir=c["out"]).model
    names = tuple(h.name for h in model.cfg.tasks)
    table = ex.ablation_table(model, names, split=c["split"], limit=c["eval_limit"])
    print(ex.format_table(table), end="")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    c = resolve(args)
    torch.manual_seed(c["seed"])
    ops = ex.op_gradient_report(args.instances, c["seed"])
    if args.corrupt_adjoint:
        if args.corrupt_adjoint not in ad.OPS:
            raise UsageError(f"unknown op {args.corrupt_adjoint!r}")
        with ad.corrupt_adjoint(args.corrupt_adjoint):
            ops = ex.op_gradient_report(args.instances, c["seed"])
            tasks = ex.gradcheck_audit(coords=args.coords, seed=c["seed"])
    else:
        tasks = ex.gradcheck_audit(coords=args.coords, seed=c["seed"])
    failed = []
    for name, err in ops.items():
        status = "ok" if err < GRAD_TOL else "FAIL"
        print(f"op\t{name}\t{err:.3e}\t{status}")
        if status == "FAIL":
            failed.append(name)
    for name, err in tasks.items():
        status = "ok" if err < GRAD_TOL else "FAIL"
        print(f"model\t{name}\t{err:.3e}\t{status}")
    if failed:
        print(f"gradient check failed for op(s): {', '.join(failed)}", file=sys.stderr)
    bad_model = [n for n, e in tasks.items() if e >= GRAD_TOL]
    return EXIT_CHECK_FAILED if failed or bad_model else EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    c = resolve(args)
    if c["checkpoint"]:
        model = _load(c["checkpoint"])
    else:
        model = ex.build_model(TASK_NAMES, c["preset"], c["seed"], precision=c["precision"])
    model.eval()
    print(f"parameters\tall={count_parameters(model)}\ttrunk={count_parameters(model, 'trunk')}")
    for h in model.cfg.tasks:
        print(f"parameters\t{h.name}={count_parameters(model, h.name)}")
    task = make_task(args.task)
    n = len(task.split(c["split"]))
    if not 0 <= args.index < n:
        raise UsageError(f"--index must be in [0, {n})")
    batch = make_batch(task, [args.index], c["split"], model.dtype)
    with torch.no_grad():
        state = encode_batch(model, batch)
    print(f"links\t{state.links}")
    print(f"R={state.R}\tP={state.P}")
    if args.dump_trace:
        print("cache\tcall\ttime\tspace")
        print(state.dump_trace(), end="")
    return EXIT_OK


def cmd_zeroshot(args: argparse.Namespace) -> int:
    c = resolve(args)
    model = _load(c["checkpoint"])
    try:
        model.head("captioning")
    except KeyError:
        raise UsageError("zeroshot needs a checkpoint with a captioning head") from None
    report = ex.zero_shot_report(model, n=args.samples, seed=c["seed"])
    for row in report.pop("examples"):
        print(f"clip\t{row['clip']}\tcaption\t{row['caption']} <eos>")
    print(json.dumps(report, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omninet", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, tasks=True, train=False, ablate=False, checkpoint=False, split=False):
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--precision", choices=sorted(ad.DTYPES))
        if tasks:
            p.add_argument("--tasks", help="comma-separated task names, or all4")
        if train:
            p.add_argument("--steps", type=int, help="iterations per task")
            p.add_argument("--mode", choices=MODES)
            p.add_argument("--dropout", type=float)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--lr-factor", dest="lr_factor", type=float, help="multiplier on the Noam rate")
            p.add_argument("--out", help="run directory")
        if ablate:
            p.add_argument("--ablate", choices=ex.ABLATIONS)
        if checkpoint:
            p.add_argument("--checkpoint")
        if split:
            p.add_argument("--split", choices=SPLITS)
            p.add_argument("--eval-limit", dest="eval_limit", type=int)

    p = sub.add_parser("train", help="train and write checkpoint + metrics log")
    common(p, train=True, ablate=True, split=False)
    p.add_argument("--eval-limit", dest="eval_limit", type=int)
    p.add_argument("--allow-cpu-paper-base", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    common(p, ablate=True, checkpoint=True, split=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="full / no-spatial-cache / no-link-array table")
    common(p, train=True, checkpoint=True, split=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference audit")
    common(p, tasks=False)
    p.add_argument("--coords", type=int, default=200, help="sampled coordinates per task")
    p.add_argument("--instances", type=int, default=100, help="random instances per op")
    p.add_argument("--corrupt-adjoint", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="show parameter counts and the caches of one sample")
    common(p, tasks=False, checkpoint=True, split=True)
    p.add_argument("--task", choices=TASK_NAMES, default="vqa")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--dump-trace", action="store_true", help="print the provenance of every cache row")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("zeroshot", help="caption video caches with the image captioning head")
    common(p, tasks=False, checkpoint=True)
    p.add_argument("--samples", type=int, default=500)
    p.set_defaults(func=cmd_zeroshot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ContractError) as exc:
        print(f"omninet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
