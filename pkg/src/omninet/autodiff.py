"""Dense tensor operations with reverse-mode differentiation.

Tensors are ``torch.Tensor`` objects and the computation graph is the one torch
records during the forward pass. This module pins down the exact semantics the
rest of the package relies on (error behaviour, masking, loss averaging) and
provides the central-difference harness used to audit every adjoint.

Every op is registered by name so that :func:`corrupt_adjoint` can perturb its
backward pass; the gradient-check command uses that as a negative control.
"""

from __future__ import annotations

import contextlib
import functools
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AllPaddingError, ContractError, DimensionError

DTYPES = {"float32": torch.float32, "float64": torch.float64}

OPS: dict[str, Callable] = {}
_corrupted: set[str] = set()


class _ScaledAdjoint(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * 1.5


def _register(name: str):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            out = fn(*args, **kwargs)
            if name in _corrupted and out.requires_grad:
                out = _ScaledAdjoint.apply(out)
            return out

        OPS[name] = wrapper
        return wrapper

    return deco


@contextlib.contextmanager
def corrupt_adjoint(name: str) -> Iterator[None]:
    """Scale the adjoint of op ``name`` by 1.5 while the context is active."""
    if name not in OPS:
        raise KeyError(f"unknown op {name!r}")
    _corrupted.add(name)
    try:
        yield
    finally:
        _corrupted.discard(name)


@_register("matmul")
def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        raise DimensionError(
            f"matmul: batch dims of {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None
    return torch.matmul(a, b)


@_register("softmax")
def softmax(x: torch.Tensor, axis: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Max-subtracted softmax. Entries where ``mask`` is False get probability 0."""
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


@_register("layer_norm")
def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


@_register("add")
def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast("add", a, b)
    return a + b


@_register("mul")
def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast("mul", a, b)
    return a * b


def _check_broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


@_register("concat")
def concat(tensors: Sequence[torch.Tensor], axis: int = 0) -> torch.Tensor:
    return torch.cat(list(tensors), dim=axis)


@_register("reshape")
def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    """Row-major reshape."""
    try:
        return x.reshape(tuple(shape))
    except RuntimeError:
        raise DimensionError(f"reshape: {tuple(x.shape)} cannot become {tuple(shape)}") from None


@_register("mean")
def mean(x: torch.Tensor, axis: int) -> torch.Tensor:
    return x.mean(dim=axis)


@_register("relu")
def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


@_register("embedding_lookup")
def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return F.embedding(ids, table)


@_register("cross_entropy")
def cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, ignore_index: int = -100, per_sample: bool = False
) -> torch.Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore_index``.

    With ``per_sample`` the mean is taken within each row of ``targets`` first and
    then across rows that have at least one supervised position.
    """
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    keep = flat_targets != ignore_index
    if not bool(keep.any()):
        raise AllPaddingError("all-padding batch: no supervised positions")
    kept = flat_targets[keep]
    if int(kept.min()) < 0 or int(kept.max()) >= logits.shape[-1]:
        raise IndexError(f"target id out of range [0, {logits.shape[-1]})")
    if not per_sample:
        return F.cross_entropy(flat_logits, flat_targets, ignore_index=ignore_index)
    nll = F.cross_entropy(flat_logits, flat_targets, ignore_index=ignore_index, reduction="none")
    nll = nll.reshape(targets.shape).reshape(targets.shape[0], -1)
    counts = (targets != ignore_index).reshape(targets.shape[0], -1).sum(1)
    rows = counts > 0
    return (nll.sum(1)[rows] / counts[rows]).mean()


@_register("dropout")
def dropout(x: torch.Tensor, rate: float, training: bool) -> torch.Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not training or rate == 0.0:
        return x
    return F.dropout(x, rate, training=True)


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar ``loss``.

    A loss tensor can be back-propagated once; a second call raises even when
    torch itself would allow it.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, "_omninet_consumed", False):
        raise ContractError("backward() already called on this graph; re-run the forward pass")
    try:
        loss.backward()
    except RuntimeError as exc:
        raise ContractError(str(exc)) from exc
    loss._omninet_consumed = True


# ---------------------------------------------------------------------------
# Finite-difference harness

def rel_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_difference(
    f: Callable[[], torch.Tensor], x: torch.Tensor, index: tuple[int, ...], h: float = 1e-5
) -> float:
    """Derivative of scalar ``f()`` w.r.t. ``x[index]`` by central differences."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + h
        plus = f().item()
        x[index] = orig - h
        minus = f().item()
        x[index] = orig
    return (plus - minus) / (2 * h)


def gradient_check(
    f: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    n_coords: int | None = None,
    seed: int = 0,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autodiff and central differences.

    Central differences at h=1e-5 carry ~1e-11 of round-off, so relative
    error is meaningless for gradients much below 1e-7; ``floor`` caps the
    denominator from below at a level where that noise stays under 1e-5.

    ``tensors`` must be float64 leaves with ``requires_grad``. When ``n_coords``
    is given, that many coordinates are sampled uniformly over all tensors;
    otherwise every coordinate is checked.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    backward(loss)
    grads = [t.grad if t.grad is not None else torch.zeros_like(t) for t in tensors]

    coords = [(i, idx) for i, t in enumerate(tensors) for idx in np.ndindex(*t.shape)]
    if n_coords is not None and n_coords < len(coords):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[p] for p in sorted(picks)]

    worst = 0.0
    with torch.no_grad():
        for i, idx in coords:
            numeric = central_difference(f, tensors[i], idx, h)
            worst = max(worst, rel_error(grads[i][idx].item(), numeric, floor))
    return worst
