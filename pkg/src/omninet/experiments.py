"""Experiment helpers shared by the CLI, the scripts and the acceptance tests.

Runs are cached on disk under a directory named by a hash of their full
configuration, so repeated invocations with identical flags reuse the
checkpoint and metrics instead of retraining.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import autodiff as ad
from . import cnp
from .cache import CacheState
from .cnp import OmniNetModel, TaskHead, generate_greedy, load_checkpoint, save_checkpoint
from .peripherals import VISION
from .tasks import (
    CAPTION_VOCAB,
    LANGUAGE_VOCAB,
    TASK_NAMES,
    TaskSpec,
    chance_level,
    make_batch,
    make_task,
    render_video,
    video_script,
)
from .trainer import PRIMARY_METRIC, MetricsLog, TrainConfig, batch_loss, evaluate, train_multitask

ABLATIONS = ("none", "no-spatial-cache", "no-link-array")


def task_heads(tasks: Sequence[TaskSpec]) -> tuple[TaskHead, ...]:
    return tuple(TaskHead(t.name, t.task_id, t.vocab_size, t.max_len) for t in tasks)


def build_model(task_names: Sequence[str], preset: str = "toy", seed: int = 0, **overrides) -> OmniNetModel:
    tasks = [make_task(n) for n in task_names]
    cfg = cnp.preset(preset, tasks=task_heads(tasks), lang_vocab_size=len(LANGUAGE_VOCAB), seed=seed, **overrides)
    return OmniNetModel(cfg)


@contextlib.contextmanager
def ablated(model: OmniNetModel, ablation: str) -> Iterator[OmniNetModel]:
    """Temporarily switch off the spatial cache or the link array."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    saved = model.spatial_cache, model.link_array
    model.spatial_cache = ablation != "no-spatial-cache"
    model.link_array = ablation != "no-link-array"
    try:
        yield model
    finally:
        model.spatial_cache, model.link_array = saved


# ---------------------------------------------------------------------------
# Training runs

@dataclass(frozen=True)
class RunSpec:
    tasks: tuple[str, ...] = TASK_NAMES
    steps: int = 2000
    seed: int = 0
    mode: str = "sequential"
    preset: str = "toy"
    dropout: float = 0.0
    precision: str = "float32"
    ablate: str = "none"  # applied during training as well as evaluation
    batch_size: int = 32
    eval_limit: int | None = None
    lr_factor: float = 1.0
    max_drift: int | None = 1  # async only

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return f"{'-'.join(self.tasks)}_s{self.seed}_{self.mode}_" + hashlib.blake2b(blob, digest_size=6).hexdigest()


@dataclass
class RunResult:
    spec: RunSpec
    model: OmniNetModel
    metrics: dict[str, dict[str, float]]
    directory: Path | None = None
    seconds: float = 0.0
    reused: bool = False
    extra: dict = field(default_factory=dict)


def train_run(spec: RunSpec, out_dir: str | Path | None = None, cache_dir: str | Path | None = None) -> RunResult:
    """Train per ``spec``; write model.ckpt, metrics.tsv and run.json into the run directory.

    With ``cache_dir`` the run lives in ``cache_dir/<spec.key()>`` and is loaded
    from there if it already finished.
    """
    directory = Path(out_dir) if out_dir is not None else (Path(cache_dir) / spec.key() if cache_dir else None)
    if directory is not None and (directory / "run.json").exists():
        info = json.loads((directory / "run.json").read_text())
        if info["spec"] == asdict(spec) | {"tasks": list(spec.tasks)}:
            model = load_checkpoint(directory / "model.ckpt")
            return RunResult(spec, model, info["metrics"], directory, info["seconds"], reused=True)
    model = build_model(spec.tasks, spec.preset, spec.seed, dropout=spec.dropout, precision=spec.precision,
                        spatial_cache=spec.ablate != "no-spatial-cache", link_array=spec.ablate != "no-link-array")
    tasks = [make_task(n) for n in spec.tasks]
    cfg = TrainConfig(steps_per_task=spec.steps, batch_size=spec.batch_size, mode=spec.mode, seed=spec.seed,
                      eval_limit=spec.eval_limit, lr_factor=spec.lr_factor, max_drift=spec.max_drift)
    log = None
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
        log = MetricsLog(directory / "metrics.tsv")
    try:
        result = train_multitask(model, tasks, cfg, log, out_dir=directory)
    finally:
        if log is not None:
            log.close()
    if directory is not None:
        save_checkpoint(model, directory / "model.ckpt")
        info = {"spec": asdict(spec) | {"tasks": list(spec.tasks)}, "metrics": result.metrics,
                "seconds": result.seconds}
        (directory / "run.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return RunResult(spec, model, result.metrics, directory, result.seconds)


# Recipe shared by the scripts and the acceptance suite. Peak Noam rate at
# d_model=64 is ~4e-3 with factor 1; halving it is what lets VQA converge.
RECIPE = dict(steps=2000, lr_factor=0.5, dropout=0.0, batch_size=32)


def recipe_spec(tasks: Sequence[str], seed: int = 0, mode: str = "sequential", ablate: str = "none") -> RunSpec:
    return RunSpec(tasks=tuple(tasks), seed=seed, mode=mode, ablate=ablate, **RECIPE)


ACCEPTANCE_SEEDS = (0, 1, 2)


def acceptance_specs() -> list[RunSpec]:
    """Every training run the acceptance suite reads, most informative first."""
    specs = [recipe_spec(TASK_NAMES, s) for s in ACCEPTANCE_SEEDS]
    specs += [recipe_spec((n,), 0) for n in TASK_NAMES]
    specs += [recipe_spec(("captioning",), s, ablate="no-spatial-cache") for s in ACCEPTANCE_SEEDS]
    specs += [recipe_spec(TASK_NAMES, s, mode="async") for s in ACCEPTANCE_SEEDS]
    return specs


def primary(metrics: dict[str, dict[str, float]], task: str) -> float:
    return metrics[task][PRIMARY_METRIC[task]]


# ---------------------------------------------------------------------------
# Ablations

def ablation_table(model: OmniNetModel, task_names: Sequence[str], ablations: Sequence[str] = ABLATIONS,
                   split: str = "val", limit: int | None = None) -> dict[str, dict[str, float]]:
    """Primary metric per (ablation, task), switching components off at evaluation time."""
    table: dict[str, dict[str, float]] = {}
    for ab in ablations:
        with ablated(model, ab):
            table[ab] = {n: evaluate(model, make_task(n), split, limit)[PRIMARY_METRIC[n]] for n in task_names}
    return table


def relative_drop(full: float, ablated_value: float) -> float:
    return 0.0 if full == 0 else (full - ablated_value) / full


def format_table(table: dict[str, dict[str, float]]) -> str:
    tasks = list(next(iter(table.values())))
    lines = ["\t".join(["ablation", *tasks])]
    for ab, row in table.items():
        lines.append("\t".join([ab, *(f"{row[t]:.2f}" for t in tasks)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Zero-shot: caption video caches with the image captioning head

def _video_batch(indices: Sequence[int], seed: int, dtype) -> tuple[torch.Tensor, list]:
    scripts = [video_script(seed, i) for i in indices]
    frames = np.stack([render_video(s.shape, s.color, s.r, s.positions) for s in scripts])
    return torch.from_numpy(frames).to(dtype) / 255.0, scripts


def attribute_hits(words: Sequence[str], shape: str, color: str) -> tuple[bool, bool]:
    return color in words, shape in words


@torch.no_grad()
def zero_shot_report(model: OmniNetModel, n: int = 500, seed: int = 0, batch_size: int = 100) -> dict:
    """Greedy captions for video caches, scored for mentions of the clip's shape and color.

    The baseline draws captions from the captioning training set, which carries
    no information about the clip. Gate statistics are the mean temporal
    attention each frame receives in the first decoder layer.
    """
    model.eval()
    cap = make_task("captioning")
    spec = model.head("captioning")
    color_hits = shape_hits = 0
    gate_mass = np.zeros(0)
    rows = []
    captured: list[torch.Tensor] = []
    hook = model.decoder[0].temporal_attn.register_forward_hook(lambda m, a, out: captured.append(out[1]))
    try:
        for start in range(0, n, batch_size):
            idx = range(start, min(start + batch_size, n))
            pixels, scripts = _video_batch(idx, seed + 7919, model.dtype)  # seed offset: not the video val set
            state = CacheState()
            model.encode(state, model.vision(pixels), VISION)
            captured.clear()
            outs = generate_greedy("captioning", state, model, spec.max_len, cap.end_token)
            # first decoding step: scores [B, h, 1, F] averaged over heads
            mass = captured[0][:, :, 0].mean(1).double().numpy().sum(0)
            gate_mass = mass if gate_mass.size == 0 else gate_mass + mass
            for ids, s in zip(outs, scripts):
                words = [CAPTION_VOCAB.tokens[i] for i in ids]
                c, sh = attribute_hits(words, s.shape, s.color)
                color_hits += c
                shape_hits += sh
                if len(rows) < 10:
                    rows.append({"clip": f"{s.color} {s.shape} {s.label}", "caption": " ".join(words)})
    finally:
        hook.remove()
    rng = np.random.default_rng(seed)
    train = cap.split("train")
    base_color = base_shape = 0
    for i in range(n):
        s = video_script(seed + 7919, i)
        words = [CAPTION_VOCAB.tokens[t] for t in train[int(rng.integers(len(train)))].target[:-1]]
        c, sh = attribute_hits(words, s.shape, s.color)
        base_color += c
        base_shape += sh
    return {
        "n": n,
        "color_rate": 100.0 * color_hits / n,
        "shape_rate": 100.0 * shape_hits / n,
        "attribute_rate": 50.0 * (color_hits + shape_hits) / n,
        "baseline_color_rate": 100.0 * base_color / n,
        "baseline_shape_rate": 100.0 * base_shape / n,
        "baseline_attribute_rate": 50.0 * (base_color + base_shape) / n,
        "frame_gate_mass": (gate_mass / n).tolist(),
        "examples": rows,
    }


# ---------------------------------------------------------------------------
# Gradient audit

def _op_instance(op: str, gen: torch.Generator):
    """Random float64 inputs and a closure calling ``op`` on them."""

    def leaf(*shape, scale=1.0):
        return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).requires_grad_()

    if op == "matmul":
        return [leaf(3, 4), leaf(4, 2)], lambda a, b: ad.matmul(a, b)
    if op == "softmax":
        return [leaf(3, 5, scale=3.0)], lambda x: ad.softmax(x, -1)
    if op == "layer_norm":
        return [leaf(2, 5), leaf(5), leaf(5)], lambda x, g, b: ad.layer_norm(x, g, b)
    if op == "add":
        return [leaf(3, 4), leaf(4)], lambda a, b: ad.add(a, b)
    if op == "mul":
        return [leaf(3, 4), leaf(3, 1)], lambda a, b: ad.mul(a, b)
    if op == "concat":
        return [leaf(2, 3), leaf(1, 3)], lambda a, b: ad.concat([a, b], 0)
    if op == "reshape":
        return [leaf(2, 6)], lambda x: ad.reshape(x, (3, 4))
    if op == "mean":
        return [leaf(3, 4, 2)], lambda x: ad.mean(x, 1)
    if op == "relu":
        return [leaf(4, 5)], lambda x: ad.relu(x)
    if op == "embedding_lookup":
        return [leaf(6, 3)], lambda t: ad.embedding_lookup(t, torch.tensor([1, 5, 1]))
    if op == "cross_entropy":
        return [leaf(4, 6)], lambda x: ad.cross_entropy(x, torch.tensor([0, 5, -100, 2]))
    if op == "dropout":
        # inference path; the training path is a fixed mask times a constant
        return [leaf(3, 4)], lambda x: ad.dropout(x, 0.5, training=False)
    raise KeyError(op)


def op_gradient_report(instances: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per registered op over random 64-bit instances."""
    gen = torch.Generator().manual_seed(seed)
    report = {}
    for op in sorted(ad.OPS):
        worst = 0.0
        for k in range(instances):
            tensors, fn = _op_instance(op, gen)
            out = fn(*tensors)
            w = torch.randn(out.shape, generator=gen, dtype=torch.float64)
            err = ad.gradient_check(lambda: (fn(*tensors) * w).sum(), tensors, seed=seed + k)
            worst = max(worst, err)
        report[op] = worst
    return report


def gradcheck_audit(task_names: Sequence[str] = TASK_NAMES, coords: int = 200, seed: int = 0) -> dict[str, float]:
    """Max relative error of autodiff vs central differences on the 64-bit tiny config.

    ``coords`` parameter coordinates are sampled per task among the parameters
    that receive a gradient from that task.
    """
    out = {}
    model = build_model(TASK_NAMES, "toy", seed, d_model=8, n_h=2, n_layers=1, d_ff=16, d_emb=4,
                        vision_channels=(3, 4, 4, 4), dropout=0.0, precision="float64")
    model.eval()
    for name in task_names:
        batch = make_batch(make_task(name), [0, 1], dtype=torch.float64)
        loss = lambda: batch_loss(model, batch)  # noqa: E731
        model.zero_grad(set_to_none=True)
        ad.backward(loss())
        used = [p for p in model.parameters() if p.grad is not None]
        out[name] = ad.gradient_check(loss, used, n_coords=coords, seed=seed)
    return out


def chance_levels(task_names: Sequence[str] = TASK_NAMES) -> dict[str, float]:
    return {n: chance_level(make_task(n)) for n in task_names}
