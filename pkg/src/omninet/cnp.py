"""Central neural processor: temporal encoder, cache-attending decoder, task heads."""

from __future__ import annotations

import dataclasses
import functools
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .attention import AttentionConfig, MultiHeadAttention
from .cache import CacheState, SpatioTemporalTensor, compute_gate, encode
from .errors import ContractError, DimensionError
from .peripherals import LANGUAGE, VISION, LanguagePeripheral, VisionPeripheral


@dataclass(frozen=True)
class TaskHead:
    name: str
    task_id: int
    vocab_size: int
    max_len: int


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_h: int = 4
    n_layers: int = 2
    d_ff: int = 128
    D_len: int = 2
    tau_len: int = 4
    tasks: tuple[TaskHead, ...] = ()
    dropout: float = 0.1
    precision: str = "float32"
    lang_vocab_size: int = 64
    d_emb: int = 32
    image_size: int = 32
    vision_channels: tuple[int, ...] = (3, 16, 32, 32)
    link_array: bool = True
    spatial_cache: bool = True
    seed: int = 0

    def __post_init__(self):
        counts = (self.d_model, self.n_h, self.n_layers, self.d_ff, self.D_len, self.tau_len)
        if min(counts) < 1:
            raise ContractError("model sizes must be >= 1")
        if self.d_model % self.n_h:
            raise ContractError(f"d_model={self.d_model} not divisible by n_h={self.n_h}")
        if self.precision not in ad.DTYPES:
            raise ContractError(f"precision must be one of {sorted(ad.DTYPES)}")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids) or any(not 0 <= i < self.tau_len for i in ids):
            raise ContractError(f"task ids {ids} must be distinct and < tau_len={self.tau_len}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["tasks"] = tuple(TaskHead(**t) for t in d["tasks"])
        d["vision_channels"] = tuple(d["vision_channels"])
        return cls(**d)


PRESETS = {
    "toy": dict(d_model=64, n_h=4, n_layers=2, d_ff=128),
    "paper-base": dict(d_model=512, n_h=8, n_layers=6, d_ff=2048),
}


def preset(name: str, **overrides) -> ModelConfig:
    return ModelConfig(**{**PRESETS[name], **overrides})


@functools.lru_cache(maxsize=256)
def positional_encoding(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal encodings for positions 0..n-1 (cached; treat as read-only)."""
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe.to(dtype)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.w1 = nn.Linear(d, d_ff)
        self.w2 = nn.Linear(d_ff, d)

    def forward(self, x):
        return self.w2(ad.relu(self.w1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(AttentionConfig(cfg.n_h, cfg.d_model, dropout=cfg.dropout))
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.dropout = cfg.dropout

    def forward(self, x, mask):
        a, _ = self.attn(x, x, mask)
        x = self.norm1(x + ad.dropout(a, self.dropout, self.training))
        return self.norm2(x + ad.dropout(self.ff(x), self.dropout, self.training))


class TemporalEncoder(nn.Module):
    """Positional encoding (local to one input) followed by self-attention encoder layers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))

    def forward(self, seq: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = seq.dim() == 2
        if squeeze:
            seq = seq[None]
        x = seq + positional_encoding(seq.shape[1], seq.shape[2], seq.dtype)
        for layer in self.layers:
            x = layer(x, mask)
        return x[0] if squeeze else x


class DecoderLayer(nn.Module):
    """Masked self-attention, temporal-cache attention, gated spatial attention, feed-forward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        acfg = AttentionConfig(cfg.n_h, cfg.d_model, dropout=cfg.dropout)
        self.self_attn = MultiHeadAttention(acfg)
        self.temporal_attn = MultiHeadAttention(acfg)
        self.spatial_attn = MultiHeadAttention(acfg)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.norms = nn.ModuleList(LayerNorm(cfg.d_model) for _ in range(4))
        self.dropout = cfg.dropout

    def _residual(self, i, x, sub):
        return self.norms[i](x + ad.dropout(sub, self.dropout, self.training))

    def forward(self, y, state: CacheState, link_array: bool = True, spatial: bool = True):
        a, _ = self.self_attn(y, y, causal=True)
        y = self._residual(0, y, a)
        a, scores = self.temporal_attn(y, state.temporal, state.temporal_mask)
        y = self._residual(1, y, a)
        if spatial and state.P > 0:
            if link_array:
                gate = compute_gate(state.links, scores)
            else:
                gate = torch.ones(*scores.shape[:-1], state.P, dtype=y.dtype)
            a, _ = self.spatial_attn(y, state.spatial, state.spatial_mask, gate=gate)
            y = self._residual(2, y, a)
        return self._residual(3, y, self.ff(y))


class TaskModule(nn.Module):
    def __init__(self, d: int, vocab_size: int):
        super().__init__()
        self.out_embed = nn.Parameter(torch.randn(vocab_size, d) * d**-0.5)
        self.classifier = nn.Linear(d, vocab_size)
        nn.init.xavier_uniform_(self.classifier.weight)
        nn.init.zeros_(self.classifier.bias)


def _init_linears(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)


class OmniNetModel(nn.Module):
    """Shared trunk plus one output embedding and classifier per registered task.

    The trunk (peripherals, domain/task embeddings, temporal encoder, decoder)
    is identical no matter how many tasks are registered; task heads are
    initialised from a seed derived from their task id.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.link_array = cfg.link_array
        self.spatial_cache = cfg.spatial_cache
        d = cfg.d_model
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.vision = VisionPeripheral(d, cfg.image_size, cfg.vision_channels)
            self.language = LanguagePeripheral(cfg.lang_vocab_size, d, cfg.d_emb)
            self.domain_embedding = nn.Embedding(cfg.D_len, d)
            self.domain_proj = nn.Linear(2 * d, d)
            self.temporal_encoder = TemporalEncoder(cfg)
            self.task_embedding = nn.Embedding(cfg.tau_len, d)
            self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
            for emb in (self.domain_embedding, self.task_embedding):
                nn.init.normal_(emb.weight, 0.0, d**-0.5)
            for part in (self.language, self.domain_proj, self.temporal_encoder, self.decoder):
                _init_linears(part)
            _init_linears(self.vision)
            self.heads = nn.ModuleDict()
            for head in cfg.tasks:
                torch.manual_seed(cfg.seed * 1000 + 17 + head.task_id)
                self.heads[head.name] = TaskModule(d, head.vocab_size)
        self.to(ad.DTYPES[cfg.precision])

    # -- task registry -------------------------------------------------------
    def head(self, task: int | str) -> TaskHead:
        for h in self.cfg.tasks:
            if task in (h.task_id, h.name):
                return h
        raise KeyError(f"task {task!r} not registered")

    def peripheral(self, domain: int) -> nn.Module:
        return {VISION: self.vision, LANGUAGE: self.language}[domain]

    def encode(self, state: CacheState, x: SpatioTemporalTensor, domain: int) -> CacheState:
        return encode(state, x, domain, self, spatial_cache=self.spatial_cache)

    def decode(self, y_shifted: torch.Tensor, task: int | str, state: CacheState) -> torch.Tensor:
        return decode_step_logits(y_shifted, task, state, self)

    @property
    def dtype(self) -> torch.dtype:
        return self.task_embedding.weight.dtype


def decode_step_logits(y_shifted: torch.Tensor, task: int | str, state: CacheState, model: OmniNetModel) -> torch.Tensor:
    """Teacher-forced logits [B, N, V_task] from y_shifted [B, N-1] (or [N-1])."""
    if not state.temporal_blocks:
        raise ContractError("empty temporal cache: encode() never called")
    head = model.head(task)
    squeeze = y_shifted.dim() == 1
    if squeeze:
        y_shifted = y_shifted[None]
    b = state.temporal_blocks[0].shape[0]
    if y_shifted.shape[0] != b:
        raise DimensionError(f"y_shifted batch {y_shifted.shape[0]} != cache batch {b}")
    mod = model.heads[head.name]
    d = model.cfg.d_model
    start = model.task_embedding.weight[head.task_id].expand(b, 1, d)
    if y_shifted.shape[1]:
        y = ad.concat([start, ad.embedding_lookup(mod.out_embed, y_shifted)], 1)
    else:
        y = start
    n = y.shape[1]
    y = y * math.sqrt(d) + positional_encoding(n, d, y.dtype)
    for layer in model.decoder:
        y = layer(y, state, model.link_array, model.spatial_cache)
    logits = mod.classifier(y)
    return logits[0] if squeeze else logits


def forward_task(
    inputs: Sequence[tuple[SpatioTemporalTensor, int]],
    y_shifted: torch.Tensor,
    task: int | str,
    model: OmniNetModel,
) -> torch.Tensor:
    """Fresh cache, one encode() per input in order, then teacher-forced decoding."""
    if not inputs:
        raise ContractError("forward_task needs at least one input")
    state = CacheState()
    for x, domain in inputs:
        model.encode(state, x, domain)
    return decode_step_logits(y_shifted, task, state, model)


@torch.no_grad()
def generate_greedy(
    task: int | str, state: CacheState, model: OmniNetModel, max_len: int, end_token: int
) -> list[list[int]]:
    """Greedy decoding for every sample in the cache batch; end tokens are dropped."""
    head = model.head(task)
    if max_len > head.max_len:
        raise ContractError(f"max_len {max_len} exceeds task limit {head.max_len}")
    b = state.temporal_blocks[0].shape[0]
    prefix = torch.zeros(b, 0, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_len):
        logits = decode_step_logits(prefix, task, state, model)
        nxt = logits[:, -1].argmax(-1)
        for i in range(b):
            if not done[i]:
                if int(nxt[i]) == end_token:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        if bool(done.all()):
            break
        prefix = torch.cat([prefix, nxt[:, None]], 1)
    return out


def count_parameters(model: OmniNetModel, subset: str = "all") -> int:
    """Exact parameter count for "all", "trunk" or a task name/id."""
    if subset == "all":
        params = list(model.parameters())
    elif subset == "trunk":
        params = [p for name, p in model.named_parameters() if not name.startswith("heads.")]
    else:
        params = list(model.heads[model.head(subset).name].parameters())
    return sum(p.numel() for p in params)


# ---------------------------------------------------------------------------
# Checkpoints
#
#   omninet-checkpoint 1\n
#   config <ModelConfig as one-line JSON, task registry included>\n
#   param <name> <dim> <dim> ...\n      (one line per parameter, manifest order)
#   data\n
#   <little-endian float32 arrays, concatenated in manifest order>

MAGIC = "omninet-checkpoint 1"


def checkpoint_bytes(model: OmniNetModel) -> bytes:
    buf = io.BytesIO()
    lines = [MAGIC, "config " + model.cfg.to_json()]
    state = model.state_dict()
    for name, t in state.items():
        lines.append(" ".join(["param", name, *map(str, t.shape)]))
    lines.append("data")
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for t in state.values():
        buf.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: OmniNetModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path, **overrides) -> OmniNetModel:
    raw = Path(path).read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        end = raw.index(b"\n", pos)
        text = raw[pos:end].decode("ascii")
        pos = end + 1
        return text

    if line() != MAGIC:
        raise ValueError(f"{path}: not an omninet checkpoint")
    kind, _, body = line().partition(" ")
    if kind != "config":
        raise ValueError(f"{path}: missing config header")
    cfg = ModelConfig.from_dict({**json.loads(body), **overrides})
    manifest = []
    while (text := line()) != "data":
        _, name, *dims = text.split(" ")
        manifest.append((name, tuple(int(x) for x in dims)))
    model = OmniNetModel(cfg)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    if dict(manifest) != expected or len(manifest) != len(expected):
        raise ValueError(f"{path}: parameter manifest does not match the config header")
    state = {}
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameter data")
    model.load_state_dict(state)
    return model
