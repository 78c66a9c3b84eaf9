"""Losses, Adam/Noam optimisation and the multi-task trainer.

One worker per task. Each iteration a worker copies the global parameters into
its private replica, runs forward/backward on a local batch, writes the
gradients onto the global model and calls the shared optimizer. In
``sequential`` mode workers take strict turns (bitwise reproducible); in
``async`` mode they run as threads with no ordering between their writes.
"""

from __future__ import annotations

import copy
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import autodiff as ad
from .cache import CacheState
from .cnp import OmniNetModel, decode_step_logits, generate_greedy, save_checkpoint
from .errors import ContractError, NonFiniteGradientError, TrainingAborted
from .peripherals import VISION
from .tasks import IGNORE_INDEX, Batch, TaskSpec, corpus_bleu, iter_batches, make_batch

PRIMARY_METRIC = {"tagging": "accuracy", "captioning": "exact_match", "vqa": "accuracy", "video": "accuracy"}
MODES = ("sequential", "async")


def noam_lr(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    if step < 1:
        raise ContractError("noam_lr is defined for step >= 1")
    return factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class OptimizerState:
    """Adam moments per parameter plus the global step counter.

    Bias correction uses a per-parameter update count, because task heads are
    only updated by their own worker. The learning rate follows the Noam
    schedule of the global step unless ``fixed_lr`` is set.
    """

    d_model: int
    warmup: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    lr_factor: float = 1.0
    fixed_lr: float | None = None
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._counter = threading.Lock()
        self._blocks: dict[str, threading.Lock] = {}

    def next_lr(self) -> float:
        with self._counter:
            self.step += 1
            step = self.step
        if self.fixed_lr is not None:
            return self.fixed_lr
        return noam_lr(step, self.d_model, self.warmup, self.lr_factor)

    def block(self, name: str) -> threading.Lock:
        lock = self._blocks.get(name)
        if lock is None:
            lock = self._blocks.setdefault(name, threading.Lock())
        return lock


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimizerState) -> float:
    """Apply one Adam update to every parameter named in ``grads``; returns the lr used."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(params[name].shape)}")
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError(name)
    lr = state.next_lr()
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        with state.block(name):
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
                state.t[name] = 0
            state.t[name] += 1
            t = state.t[name]
            m, v = state.m[name], state.v[name]
            # same operation order as torch.optim.Adam, so the two agree bitwise
            m.lerp_(g, 1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v.sqrt() / (1 - b2**t) ** 0.5).add_(state.eps)
            p.addcdiv_(m, denom, value=-(lr / (1 - b1**t)))
    return lr


# ---------------------------------------------------------------------------
# Forward passes over batches

def encode_batch(model: OmniNetModel, batch: Batch) -> CacheState:
    state = CacheState()
    for inp in batch.inputs:
        if inp.domain == VISION:
            x = model.vision(inp.data.to(model.dtype))
        else:
            x = model.language(inp.data, inp.mask)
        model.encode(state, x, inp.domain)
    return state


def batch_logits(model: OmniNetModel, batch: Batch) -> torch.Tensor:
    return decode_step_logits(batch.y_shifted, batch.task, encode_batch(model, batch), model)


def batch_loss(model: OmniNetModel, batch: Batch) -> torch.Tensor:
    """Mean over samples of each sample's mean token loss."""
    return ad.cross_entropy(batch_logits(model, batch), batch.targets, IGNORE_INDEX, per_sample=True)


@torch.no_grad()
def predict(model: OmniNetModel, task: TaskSpec, batch: Batch) -> list[list[int]]:
    """Greedy outputs per sample (no end token); class tasks give one id."""
    state = encode_batch(model, batch)
    if task.kind == "class":
        logits = decode_step_logits(batch.y_shifted[:, :0], task.name, state, model)
        return [[int(i)] for i in logits[:, 0].argmax(-1)]
    return generate_greedy(task.name, state, model, task.max_len, task.end_token)


def score(task: TaskSpec, preds: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> dict[str, float]:
    """Metrics in percent (BLEU-4 as a fraction)."""
    if task.kind == "class":
        return {"accuracy": 100.0 * np.mean([list(p) == list(t) for p, t in zip(preds, targets)])}
    golds = [list(t[:-1]) for t in targets]
    if task.name == "tagging":
        correct = sum(int(p[i] == g[i]) for p, g in zip(preds, golds) for i in range(min(len(p), len(g))))
        return {"accuracy": 100.0 * correct / sum(len(g) for g in golds)}
    return {
        "exact_match": 100.0 * np.mean([list(p) == g for p, g in zip(preds, golds)]),
        "bleu4": corpus_bleu(preds, golds),
    }


@torch.no_grad()
def evaluate(model: OmniNetModel, task: TaskSpec, split: str = "val", limit: int | None = None,
             batch_size: int = 250) -> dict[str, float]:
    was_training = model.training
    model.eval()
    preds, targets = [], []
    for batch in iter_batches(task, split, batch_size, limit):
        preds += predict(model, task, batch)
        targets += [s.target for s in batch.samples]
    model.train(was_training)
    if not targets:
        raise ContractError(f"empty split {split!r}")
    return score(task, preds, targets)


# ---------------------------------------------------------------------------
# Metrics log: one record per line, tab separated
#   <step>\t<task>\t<split>\t<metric>\t<value with 6 decimals>

class MetricsLog:
    def __init__(self, path: str | Path | None = None):
        self.records: list[tuple[int, str, str, str, float]] = []
        self._lock = threading.Lock()
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, step: int, task: str, split: str, metric: str, value: float) -> None:
        with self._lock:
            self.records.append((step, task, split, metric, float(value)))
            if self._fh:
                self._fh.write(f"{step}\t{task}\t{split}\t{metric}\t{value:.6f}\n")
                self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def series(self, task: str, split: str, metric: str) -> list[tuple[int, float]]:
        return [(s, v) for s, t, sp, m, v in self.records if (t, sp, m) == (task, split, metric)]

    @staticmethod
    def read(path: str | Path) -> list[tuple[int, str, str, str, float]]:
        out = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            step, task, split, metric, value = line.split("\t")
            out.append((int(step), task, split, metric, float(value)))
        return out


@dataclass
class TrainConfig:
    steps_per_task: int = 3000
    batch_size: int = 32
    mode: str = "sequential"
    seed: int = 0
    eval_every: int = 0  # 0: only at the end
    eval_limit: int | None = None
    log_every: int = 50
    warmup: int = 1000
    lr_factor: float = 1.0
    clip_norm: float = 1.0
    # async only: a worker may start iteration i once every worker has
    # finished i - 1 - max_drift. None lets threads run free.
    max_drift: int | None = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if self.batch_size < 1 or self.steps_per_task < 0:
            raise ContractError("batch_size must be >= 1 and steps_per_task >= 0")
        if self.max_drift is not None and self.max_drift < 0:
            raise ContractError("max_drift must be >= 0 or None")


@dataclass
class TrainResult:
    model: OmniNetModel
    metrics: dict[str, dict[str, float]]
    losses: dict[str, list[float]]
    log: MetricsLog
    seconds: float
    optimizer: OptimizerState


class Worker:
    def __init__(self, task: TaskSpec, model: OmniNetModel, opt: OptimizerState, cfg: TrainConfig, log: MetricsLog):
        self.task = task
        self.cfg = cfg
        self.log = log
        self.opt = opt
        self.global_params = dict(model.named_parameters())
        self.replica = copy.deepcopy(model)
        self.replica.train()
        self.local_params = dict(self.replica.named_parameters())
        self.rng = np.random.default_rng([cfg.seed, task.task_id])
        self.n_train = len(task.split("train"))
        self.losses: list[float] = []
        self._window: list[float] = []

    def iteration(self, it: int) -> float:
        with torch.no_grad():
            for name, p in self.local_params.items():
                p.copy_(self.global_params[name])
                p.grad = None
        idx = self.rng.integers(0, self.n_train, self.cfg.batch_size)
        batch = make_batch(self.task, idx, "train", self.replica.dtype)
        loss = batch_loss(self.replica, batch)
        ad.backward(loss)
        grads = {n: p.grad for n, p in self.local_params.items() if p.grad is not None}
        torch.nn.utils.clip_grad_norm_([self.local_params[n] for n in grads], self.cfg.clip_norm)
        for name, g in grads.items():
            self.global_params[name].grad = g
        adam_step(self.global_params, {n: self.global_params[n].grad for n in grads}, self.opt)

        value = loss.item()
        self.losses.append(value)
        self._window.append(value)
        if len(self._window) == self.cfg.log_every:
            self.log.write(it + 1, self.task.name, "train", "loss", float(np.mean(self._window)))
            self._window.clear()
        return value


def train_multitask(
    model: OmniNetModel,
    tasks: Sequence[TaskSpec],
    cfg: TrainConfig,
    log: MetricsLog | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train ``model`` in place on ``tasks`` and evaluate each on its val split."""
    if not tasks:
        raise ContractError("train_multitask needs at least one task")
    for task in tasks:
        model.head(task.name)
    log = log or MetricsLog()
    start = time.perf_counter()
    torch.manual_seed(cfg.seed)
    model.train()
    opt = OptimizerState(model.cfg.d_model, cfg.warmup, lr_factor=cfg.lr_factor)
    workers = [Worker(t, model, opt, cfg, log) for t in tasks]

    def maybe_eval(worker: Worker, it: int) -> None:
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0 and it + 1 < cfg.steps_per_task:
            for k, v in evaluate(model, worker.task, "val", cfg.eval_limit).items():
                log.write(it + 1, worker.task.name, "val", k, v)
            model.train()

    errors: list[BaseException] = []
    if cfg.mode == "sequential":
        try:
            for it in range(cfg.steps_per_task):
                for w in workers:
                    w.iteration(it)
                    maybe_eval(w, it)
        except Exception as exc:
            errors.append(exc)
    else:
        stop = threading.Event()
        progress = [0] * len(workers)
        turn = threading.Condition()

        def run(k: int, w: Worker) -> None:
            try:
                for it in range(cfg.steps_per_task):
                    if cfg.max_drift is not None:
                        with turn:
                            turn.wait_for(lambda: stop.is_set() or min(progress) >= it - cfg.max_drift)
                    if stop.is_set():
                        return
                    w.iteration(it)
                    maybe_eval(w, it)
                    with turn:
                        progress[k] = it + 1
                        turn.notify_all()
            except BaseException as exc:  # propagate any worker failure to the caller
                errors.append(exc)
                stop.set()
                with turn:
                    turn.notify_all()

        threads = [threading.Thread(target=run, args=(k, w), name=f"worker-{w.task.name}") for k, w in enumerate(workers)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    if errors:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(out_dir) / "partial.ckpt")
        raise TrainingAborted(f"worker failed: {errors[0]!r}") from errors[0]

    metrics = {}
    for task in tasks:
        metrics[task.name] = evaluate(model, task, "val", cfg.eval_limit)
        for k, v in metrics[task.name].items():
            log.write(cfg.steps_per_task, task.name, "val", k, v)
    losses = {w.task.name: w.losses for w in workers}
    return TrainResult(model, metrics, losses, log, time.perf_counter() - start, opt)
