"""Spatial cache, temporal cache and link array.

Every input of a task is written into a :class:`CacheState` by :func:`encode`.
The decoder later reads the caches back and uses :func:`compute_gate` to turn
temporal attention scores into a gate over the spatial cache, so the i-th
spatial row and the i-th gate column always describe the same
(call, time, space) triple.

All tensors carry a leading batch axis. Inputs of one batch share (t, s) in
the padded layout; shorter samples are described by a per-row mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import autodiff as ad
from .errors import ContractError, DimensionError


@dataclass
class SpatioTemporalTensor:
    """Peripheral output ``x`` of shape [B, t, s, d_model].

    ``time_mask`` ([B, t], True = real step) marks padded time steps; it is
    None when every step is real.
    """

    x: torch.Tensor
    time_mask: torch.Tensor | None = None

    def __post_init__(self):
        if self.x.dim() == 3:
            self.x = self.x.unsqueeze(0)
        if self.x.dim() != 4 or min(self.x.shape[1:3]) < 1:
            raise DimensionError(f"expected [B, t, s, d] with t, s >= 1, got {tuple(self.x.shape)}")
        if self.time_mask is not None and tuple(self.time_mask.shape) != tuple(self.x.shape[:2]):
            raise DimensionError("time_mask must be [B, t]")

    @property
    def t(self) -> int:
        return self.x.shape[1]

    @property
    def s(self) -> int:
        return self.x.shape[2]

    def mask(self) -> torch.Tensor:
        if self.time_mask is None:
            return torch.ones(self.x.shape[:2], dtype=torch.bool, device=self.x.device)
        return self.time_mask


@dataclass
class CacheState:
    links: list[tuple[int, int]] = field(default_factory=list)
    temporal_blocks: list[torch.Tensor] = field(default_factory=list)
    temporal_masks: list[torch.Tensor] = field(default_factory=list)
    spatial_blocks: list[torch.Tensor] = field(default_factory=list)
    spatial_masks: list[torch.Tensor] = field(default_factory=list)

    @property
    def R(self) -> int:
        return sum(t for t, _ in self.links)

    @property
    def P(self) -> int:
        return sum(b.shape[1] for b in self.spatial_blocks)

    @property
    def temporal(self) -> torch.Tensor:
        return ad.concat(self.temporal_blocks, 1)

    @property
    def temporal_mask(self) -> torch.Tensor:
        return torch.cat(self.temporal_masks, 1)

    @property
    def spatial(self) -> torch.Tensor:
        return ad.concat(self.spatial_blocks, 1)

    @property
    def spatial_mask(self) -> torch.Tensor:
        return torch.cat(self.spatial_masks, 1)

    def trace(self) -> list[tuple[str, int, int, int]]:
        """Provenance of every cache row as (cache, call, time, space)."""
        rows = [("temporal", k, i, -1) for k, (t, _) in enumerate(self.links) for i in range(t)]
        if self.spatial_blocks:
            rows += [
                ("spatial", k, i, j)
                for k, (t, s) in enumerate(self.links)
                if s > 1
                for i in range(t)
                for j in range(s)
            ]
        return rows

    def dump_trace(self) -> str:
        return "".join(f"{c}\t{k}\t{i}\t{j}\n" for c, k, i, j in self.trace())


def reset(state: CacheState | None = None) -> CacheState:
    """Empty caches and link array."""
    if state is None:
        return CacheState()
    for part in (
        state.links,
        state.temporal_blocks,
        state.temporal_masks,
        state.spatial_blocks,
        state.spatial_masks,
    ):
        part.clear()
    return state


def encode(state: CacheState, x: SpatioTemporalTensor, domain: int, model, spatial_cache: bool = True) -> CacheState:
    """Write one input into the caches.

    ``model`` supplies ``domain_embedding`` (nn.Embedding), ``domain_proj``
    (2*d_model -> d_model) and ``temporal_encoder``. With ``spatial_cache``
    False, the spatial rows are not stored (ablation); the link array still
    records the input.
    """
    if not 0 <= domain < model.domain_embedding.num_embeddings:
        raise IndexError(f"domain id {domain} outside [0, {model.domain_embedding.num_embeddings})")
    if not bool(torch.isfinite(x.x).all()):
        raise ContractError("encode(): non-finite input")
    b, t, s, d = x.x.shape
    mask = x.mask()
    state.links.append((t, s))

    d_emb = model.domain_embedding.weight[domain].expand(b, t, s, d)
    h = model.domain_proj(ad.concat([x.x, d_emb], -1))

    if s > 1 and spatial_cache:
        state.spatial_blocks.append(ad.reshape(h, (b, t * s, d)))
        state.spatial_masks.append(mask.repeat_interleave(s, dim=1))

    temporal = model.temporal_encoder(ad.mean(h, 2), mask)
    state.temporal_blocks.append(temporal)
    state.temporal_masks.append(mask)
    return state


def compute_gate(links: list[tuple[int, int]], scores: torch.Tensor) -> torch.Tensor:
    """Expand temporal attention scores [..., n_h, N, R] into a gate [..., n_h, N, P].

    Walks the link array with a running temporal offset. Inputs with s > 1
    contribute their t score columns, each repeated s times contiguously;
    inputs with s == 1 only advance the offset.
    """
    r = sum(t for t, _ in links)
    if scores.shape[-1] != r:
        raise ContractError(f"score key dimension {scores.shape[-1]} != R={r} from link array")
    lead = scores.shape[:-1]
    blocks = []
    idx = 0
    for t, s in links:
        if s > 1:
            a = scores[..., idx : idx + t]
            a = a.unsqueeze(-1).expand(*lead, t, s)
            blocks.append(a.reshape(*lead, t * s))
        idx += t
    if not blocks:
        return scores.new_zeros(*lead, 0)
    return torch.cat(blocks, -1)
