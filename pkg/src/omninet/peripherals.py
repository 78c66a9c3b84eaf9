"""Domain peripherals that turn raw inputs into spatio-temporal tensors."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from . import autodiff as ad
from .cache import SpatioTemporalTensor
from .errors import DimensionError

VISION, LANGUAGE = 0, 1

# Reference sizes of the pretrained subword table; documentation only.
PAPER_D_EMB = 300
PAPER_VOCAB_SIZE = 25000


class Vocabulary:
    """Fixed token list; a token's id is its line number in the vocabulary file."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as exc:
            raise IndexError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


class VisionPeripheral(nn.Module):
    """Strided conv stack (32 -> 4 for the toy size), then a linear map to d_model.

    Frames of a video go through the same stack independently. A learned
    embedding of the grid position is added to every spatial row.
    """

    def __init__(self, d_model: int, image_size: int = 32, channels: Sequence[int] = (3, 16, 32, 32)):
        super().__init__()
        self.image_size = image_size
        self.in_channels = channels[0]
        layers: list[nn.Module] = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()]
        self.convs = nn.Sequential(*layers)
        self.stride = 2 ** (len(channels) - 1)
        grid = -(-image_size // self.stride)
        self.n_spatial = grid * grid
        self.proj = nn.Linear(channels[-1], d_model)
        self.pos = nn.Parameter(torch.randn(self.n_spatial, d_model) * d_model**-0.5)

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        """Conv features [n, h', w', n_c'] for frames [n, h, w, n_c]."""
        n, h, w, c = frames.shape
        if h < self.stride or w < self.stride or c != self.in_channels:
            raise DimensionError(
                f"image {h}x{w}x{c} too small or wrong channels for the vision stack "
                f"(needs >= {self.stride}x{self.stride}x{self.in_channels})"
            )
        return self.convs(frames.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

    def forward(self, pixels: torch.Tensor) -> SpatioTemporalTensor:
        """pixels: image [h, w, c], video [F, h, w, c], or batched [B, F, h, w, c]."""
        if pixels.dim() == 3:
            pixels = pixels[None, None]
        elif pixels.dim() == 4:
            pixels = pixels[None]
        b, f = pixels.shape[:2]
        if pixels.shape[2] != self.image_size or pixels.shape[3] != self.image_size:
            raise DimensionError(f"expected {self.image_size}x{self.image_size} frames, got {tuple(pixels.shape[2:4])}")
        feats = self.features(pixels.reshape(b * f, *pixels.shape[2:]))
        feats = feats.reshape(b, f, self.n_spatial, feats.shape[-1])
        return SpatioTemporalTensor(ad.add(self.proj(feats), self.pos))


class LanguagePeripheral(nn.Module):
    """Token embedding (d_emb) followed by a linear projection to d_model; s is always 1."""

    def __init__(self, vocab_size: int, d_model: int, d_emb: int = 32):
        super().__init__()
        self.embedding = nn.Parameter(torch.randn(vocab_size, d_emb) * d_emb**-0.5)
        self.proj = nn.Linear(d_emb, d_model)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None) -> SpatioTemporalTensor:
        """ids: [t] or [B, t]; mask: [B, t] with True on real tokens."""
        if ids.dim() == 1:
            ids = ids[None]
        if ids.shape[1] < 1:
            raise DimensionError("empty token sequence")
        emb = ad.embedding_lookup(self.embedding, ids)
        x = self.proj(emb)
        return SpatioTemporalTensor(x.unsqueeze(2), mask)


def vision_encode(pixels: torch.Tensor, peripheral: VisionPeripheral) -> SpatioTemporalTensor:
    return peripheral(pixels)


def language_encode(ids: torch.Tensor, peripheral: LanguagePeripheral, mask=None) -> SpatioTemporalTensor:
    return peripheral(ids, mask)
