"""Reverse-mode differentiation on top of torch autograd.

torch supplies the kernels and the tape. This module adds what the rest of the
package leans on: the primitive set used by the transformer, forward/backward
pass counters, a strict finite-value mode for tests, and a central-difference
oracle that never touches autograd.
"""
from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import torch
import torch.nn.functional as F

from .errors import ContractError, NumericError

Tensor = torch.Tensor
Parameter = torch.nn.Parameter

PRECISIONS = {32: torch.float32, 64: torch.float64}


def configure_threads(n: int | None = None) -> int:
    """Cap intra-op parallelism. Defaults to $HEADLENS_THREADS, else 1."""
    if n is None:
        n = int(os.environ.get("HEADLENS_THREADS", "1"))
    n = max(1, n)
    torch.set_num_threads(n)
    return n


def dtype_for(bits: int) -> torch.dtype:
    try:
        return PRECISIONS[bits]
    except KeyError:
        raise ContractError(f"precision must be 32 or 64, got {bits}") from None


# ---------------------------------------------------------------------------
# pass instrumentation

@dataclass
class PassCounter:
    forward: int = 0
    backward: int = 0

    def reset(self) -> None:
        self.forward = 0
        self.backward = 0


_active_counters: list[PassCounter] = []


@contextlib.contextmanager
def track_passes() -> Iterator[PassCounter]:
    """Count forward sequence-passes and backward passes inside the block.

    A forward pass is counted per sequence evaluated, so a batch of B
    sequences adds B. Each call to gradients() adds one backward pass.
    """
    counter = PassCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def record_forward(n_sequences: int) -> None:
    for c in _active_counters:
        c.forward += n_sequences


def _record_backward() -> None:
    for c in _active_counters:
        c.backward += 1


# ---------------------------------------------------------------------------
# strict numerics

_strict = False


@contextlib.contextmanager
def strict_numerics(enabled: bool = True) -> Iterator[None]:
    global _strict
    prev, _strict = _strict, enabled
    try:
        yield
    finally:
        _strict = prev


def check_finite(t: Tensor, name: str) -> Tensor:
    if _strict and not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {name}")
    return t


# ---------------------------------------------------------------------------
# primitives

def causal_softmax(scores: Tensor) -> Tensor:
    """Row softmax over the last axis with future positions masked out.

    Masked entries are exactly zero: the mask is an additive -inf.
    """
    t_q, t_k = scores.shape[-2], scores.shape[-1]
    mask = torch.ones(t_q, t_k, dtype=torch.bool, device=scores.device).triu(t_k - t_q + 1)
    bias = torch.zeros(t_q, t_k, dtype=scores.dtype, device=scores.device)
    bias = bias.masked_fill(mask, float("-inf"))
    return torch.softmax(scores + bias, dim=-1)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return x * scale * gain


def gate_heads(heads: Tensor, gates: Tensor | None) -> Tensor:
    """Scale each head's output slice by its gate.

    heads: (batch, n_heads, seq, d_head); gates: (n_heads,) or (batch, n_heads).
    With gates=None the input is returned untouched.
    """
    if gates is None:
        return heads
    if gates.dim() == 1:
        return heads * gates.view(1, -1, 1, 1)
    return heads * gates.view(gates.shape[0], gates.shape[1], 1, 1)


def embed(table: Tensor, ids: Tensor) -> Tensor:
    # backward is a scatter-add into the table rows
    return F.embedding(ids, table)


def token_nll(logits: Tensor, targets: Tensor) -> Tensor:
    """Per-position negative log-likelihood, shape (batch, seq)."""
    b, t, v = logits.shape
    nll = F.cross_entropy(logits.reshape(b * t, v), targets.reshape(b * t), reduction="none")
    return nll.view(b, t)


# ---------------------------------------------------------------------------
# evaluation and gradients

def evaluate(fn: Callable[..., Tensor], *args, name: str = "expression", **kwargs) -> Tensor:
    """Run a forward computation, turning shape failures into ContractError."""
    try:
        out = fn(*args, **kwargs)
    except RuntimeError as exc:
        msg = str(exc)
        if "shape" in msg or "size" in msg or "dimension" in msg:
            raise ContractError(f"shape mismatch in {name}: {msg}") from exc
        raise
    return check_finite(out, name)


def gradients(loss: Tensor, params: Sequence[Tensor], retain_graph: bool = False) -> dict[Tensor, Tensor]:
    """Backward pass: d(loss)/d(param) for every param, also stored in param.grad."""
    if loss.dim() != 0:
        raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=retain_graph)
    _record_backward()
    out: dict[Tensor, Tensor] = {}
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        check_finite(g, "gradient")
        p.grad = g
        out[p] = g
    return out


def central_difference(fn: Callable[[], float | Tensor], tensor: Tensor, index: tuple[int, ...],
                       step: float = 1e-4) -> float:
    """(f(x+h) - f(x-h)) / 2h for one entry of tensor, evaluated without autograd."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + step
        up = float(fn())
        tensor[index] = orig - step
        down = float(fn())
        tensor[index] = orig
    return (up - down) / (2.0 * step)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def sample_indices(shape: Iterable[int], n: int, generator: torch.Generator) -> list[tuple[int, ...]]:
    shape = tuple(shape)
    total = math.prod(shape)
    flat = torch.randperm(total, generator=generator)[: min(n, total)].tolist()
    out = []
    for f in flat:
        idx = []
        for dim in reversed(shape):
            idx.append(f % dim)
            f //= dim
        out.append(tuple(reversed(idx)))
    return out
