"""Multi-head scaled dot-product attention: plain, causal and gated."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import autodiff as ad
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class AttentionConfig:
    n_h: int
    d_model: int
    d_k: int | None = None
    d_v: int | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_h < 1 or self.d_model < 1:
            raise ContractError("n_h and d_model must be positive")
        if self.d_k is None or self.d_v is None:
            if self.d_model % self.n_h:
                raise ContractError(f"d_model={self.d_model} not divisible by n_h={self.n_h}")
            object.__setattr__(self, "d_k", self.d_k or self.d_model // self.n_h)
            object.__setattr__(self, "d_v", self.d_v or self.d_model // self.n_h)
        if self.d_k < 1 or self.d_v < 1:
            raise ContractError("d_k and d_v must be positive")


def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    key_mask: torch.Tensor | None = None,
    causal: bool = False,
    gate: torch.Tensor | None = None,
    scale_dim: int | None = None,
    dropout: float = 0.0,
    training: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-head attention core.

    q: [B, h, N, d_k], k: [B, h, M, d_k], v: [B, h, M, d_v]
    key_mask: [B, M] (True = attendable); gate: [B, h, N, M] multiplied into the
    post-softmax scores with no renormalisation afterwards.

    Returns the per-head context [B, h, N, d_v] and the post-softmax,
    pre-gate scores [B, h, N, M].
    """
    n, m = q.shape[-2], k.shape[-2]
    scores = ad.matmul(q, k.transpose(-1, -2)) / math.sqrt(scale_dim or q.shape[-1])
    mask = None
    if key_mask is not None:
        if not bool(key_mask.any(-1).all()):
            raise ContractError("attention over an all-masked key set")
        mask = key_mask[:, None, None, :]
    if causal:
        tri = torch.ones(n, m, dtype=torch.bool, device=q.device).tril()
        mask = tri if mask is None else mask & tri
    probs = ad.softmax(scores, -1, mask)
    weights = ad.dropout(probs, dropout, training)
    if gate is not None:
        weights = ad.mul(weights, gate)
    return ad.matmul(weights, v), probs


class MultiHeadAttention(nn.Module):
    """Bias-free Q/K/V/output projections around :func:`attend`."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.w_q = nn.Linear(cfg.d_model, cfg.n_h * cfg.d_k, bias=False)
        self.w_k = nn.Linear(cfg.d_model, cfg.n_h * cfg.d_k, bias=False)
        self.w_v = nn.Linear(cfg.d_model, cfg.n_h * cfg.d_v, bias=False)
        self.w_o = nn.Linear(cfg.n_h * cfg.d_v, cfg.d_model, bias=False)
        for lin in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.xavier_uniform_(lin.weight)

    def _split(self, x: torch.Tensor, width: int) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.cfg.n_h, width).transpose(1, 2)

    def context(
        self,
        q_in: torch.Tensor,
        kv_in: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        causal: bool = False,
        gate: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Concatenated head contexts [B, N, n_h*d_v] (before w_o) and scores."""
        cfg = self.cfg
        q = self._split(self.w_q(q_in), cfg.d_k)
        k = self._split(self.w_k(kv_in), cfg.d_k)
        v = self._split(self.w_v(kv_in), cfg.d_v)
        scale = None
        if gate is not None:
            if cfg.d_k != cfg.d_v:
                raise ContractError("gated attention requires d_k == d_v")
            scale = cfg.d_v
        ctx, probs = attend(q, k, v, key_mask, causal, gate, scale, cfg.dropout, self.training)
        b, _, n, _ = ctx.shape
        return ctx.transpose(1, 2).reshape(b, n, cfg.n_h * cfg.d_v), probs

    def forward(self, q_in, kv_in, key_mask=None, causal=False, gate=None):
        ctx, probs = self.context(q_in, kv_in, key_mask, causal, gate)
        return self.w_o(ctx), probs


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.dim() == 2 else (x, False)


def multi_head_attention(
    layer: MultiHeadAttention,
    q_in: torch.Tensor,
    kv_in: torch.Tensor,
    key_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Plain attention; accepts [N, d] / [M, d] or batched [B, N, d] / [B, M, d].

    Returns the output and the scores A ([n_h, N, M], or [B, n_h, N, M]).
    """
    q, squeeze = _batched(q_in)
    kv, _ = _batched(kv_in)
    if kv.shape[-2] < 1:
        raise ContractError("attention needs at least one key")
    if key_mask is not None and key_mask.dim() == 1:
        key_mask = key_mask.unsqueeze(0)
    out, probs = layer(q, kv, key_mask)
    return (out[0], probs[0]) if squeeze else (out, probs)


def masked_self_attention(layer: MultiHeadAttention, x: torch.Tensor) -> torch.Tensor:
    """Causal self-attention: position i sees positions <= i."""
    xb, squeeze = _batched(x)
    out, _ = layer(xb, xb, causal=True)
    return out[0] if squeeze else out


def gated_attention(
    layer: MultiHeadAttention,
    q_in: torch.Tensor,
    kv_in: torch.Tensor,
    gate: torch.Tensor,
    key_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """(Softmax(QK^T / sqrt(d_v)) * G) V, per head, then the output projection."""
    q, squeeze = _batched(q_in)
    kv, _ = _batched(kv_in)
    g = gate.unsqueeze(0) if gate.dim() == 3 else gate
    expected = (q.shape[0], layer.cfg.n_h, q.shape[1], kv.shape[1])
    if tuple(g.shape) != expected:
        raise DimensionError(f"gate shape {tuple(gate.shape)} does not match {expected}")
    if key_mask is not None and key_mask.dim() == 1:
        key_mask = key_mask.unsqueeze(0)
    out, _ = layer(q, kv, key_mask, gate=g)
    return out[0] if squeeze else out
