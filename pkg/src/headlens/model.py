"""Gated decoder-only transformer, trainer, sampler, checkpoints, logit lens.

Every attention head's output can be scaled by a nonnegative gate before the
heads are concatenated and projected through W_O. A gate of 1 leaves the head
unchanged, 0 removes it, and values above 1 amplify it.
"""
from __future__ import annotations

import copy
import hashlib
import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import autodiff as ad
from .errors import ConfigError, ContractError, NumericError

log = logging.getLogger(__name__)

MAGIC = b"HLNS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 8
    n_kv_groups: int = 4
    d_model: int = 128
    d_head: int = 16
    vocab_size: int = 512
    max_seq_len: int = 64
    mlp_hidden: int = 512
    seed: int = 7

    def __post_init__(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError("n_heads * d_head must equal d_model")
        if self.n_kv_groups < 1 or self.n_heads % self.n_kv_groups:
            raise ConfigError("n_kv_groups must divide n_heads")
        if self.d_head % 2:
            raise ConfigError("rotary embeddings need an even d_head")

    @property
    def n_total_heads(self) -> int:
        return self.n_layers * self.n_heads


def _rotary(t: int, d: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv = 1.0 / (10000.0 ** (torch.arange(0, d, 2, dtype=torch.float64) / d))
    ang = torch.outer(torch.arange(t, dtype=torch.float64), inv)
    return ang.cos().to(dtype), ang.sin().to(dtype)


def _apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.n_groups = cfg.n_kv_groups
        self.d_head = cfg.d_head
        self.wq = nn.Linear(cfg.d_model, cfg.n_heads * cfg.d_head, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.n_kv_groups * cfg.d_head, bias=False)
        self.wv = nn.Linear(cfg.d_model, cfg.n_kv_groups * cfg.d_head, bias=False)
        self.wo = nn.Linear(cfg.n_heads * cfg.d_head, cfg.d_model, bias=False)

    def forward(self, x, cos, sin, gates=None, keep_pattern: bool = False):
        b, t, _ = x.shape
        q = self.wq(x).view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        k = self.wk(x).view(b, t, self.n_groups, self.d_head).transpose(1, 2)
        v = self.wv(x).view(b, t, self.n_groups, self.d_head).transpose(1, 2)
        q = _apply_rotary(q, cos, sin)
        k = _apply_rotary(k, cos, sin)
        if self.n_groups != self.n_heads:
            # query heads within a group share keys and values
            rep = self.n_heads // self.n_groups
            k = k.repeat_interleave(rep, dim=1)
            v = v.repeat_interleave(rep, dim=1)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        pattern = ad.causal_softmax(scores)
        heads = ad.gate_heads(pattern @ v, gates)
        out = self.wo(heads.transpose(1, 2).reshape(b, t, self.n_heads * self.d_head))
        if keep_pattern:
            self.last_pattern = pattern.detach()
        return out


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = nn.Parameter(torch.ones(cfg.d_model))
        self.attn = Attention(cfg)
        self.mlp_norm = nn.Parameter(torch.ones(cfg.d_model))
        self.w_gate = nn.Linear(cfg.d_model, cfg.mlp_hidden, bias=False)
        self.w_up = nn.Linear(cfg.d_model, cfg.mlp_hidden, bias=False)
        self.w_down = nn.Linear(cfg.mlp_hidden, cfg.d_model, bias=False)

    def forward(self, x, cos, sin, gates=None, keep_pattern=False):
        x = x + self.attn(ad.rms_norm(x, self.attn_norm), cos, sin, gates, keep_pattern)
        h = ad.rms_norm(x, self.mlp_norm)
        return x + self.w_down(F.silu(self.w_gate(h)) * self.w_up(h))


class TransformerModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.Parameter(torch.ones(cfg.d_model))
        self.unembed = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self._rope: dict = {}
        self.loss_curve: list[tuple[int, float]] = []
        self._init_weights()

    def _init_weights(self) -> None:
        g = torch.Generator().manual_seed(self.cfg.seed)
        std = 0.02
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm"):
                    continue
                s = std / math.sqrt(2 * self.cfg.n_layers) if name.endswith(("wo.weight", "w_down.weight")) else std
                p.copy_(torch.randn(p.shape, generator=g) * s)

    def rope(self, t: int):
        dtype = self.embed.dtype
        key = (t, dtype)
        if key not in self._rope:
            self._rope[key] = _rotary(t, self.cfg.d_head, dtype)
        return self._rope[key]

    def check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.dim() != 2:
            raise ContractError("tokens must be a (batch, seq) array")
        if tokens.shape[1] > self.cfg.max_seq_len:
            raise ContractError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise ContractError("token id outside the vocabulary")

    def _layer_gates(self, gates, layer):
        if gates is None:
            return None
        return gates[layer] if gates.dim() == 2 else gates[:, layer]

    def residuals(self, tokens, gates=None, keep_pattern=False) -> list[torch.Tensor]:
        """Residual stream after the embedding and after each layer."""
        tokens = torch.as_tensor(tokens)
        self.check_tokens(tokens)
        cos, sin = self.rope(tokens.shape[1])
        x = ad.embed(self.embed, tokens)
        out = [x]
        for layer, block in enumerate(self.blocks):
            x = ad.check_finite(block(x, cos, sin, self._layer_gates(gates, layer), keep_pattern), f"layer {layer}")
            out.append(x)
        return out

    def project(self, resid: torch.Tensor) -> torch.Tensor:
        return self.unembed(ad.rms_norm(resid, self.final_norm))

    def forward(self, tokens, gates=None):
        return self.project(self.residuals(tokens, gates)[-1])

    def clone(self, dtype: torch.dtype | None = None) -> "TransformerModel":
        m = copy.deepcopy(self)
        m._rope = {}
        if dtype is not None:
            m = m.to(dtype)
        return m


def ones_gates(cfg: ModelConfig, dtype=torch.float32) -> torch.Tensor:
    return torch.ones(cfg.n_layers, cfg.n_heads, dtype=dtype)


def _as_gates(model: TransformerModel, gates) -> torch.Tensor | None:
    if gates is None:
        return None
    g = torch.as_tensor(gates, dtype=model.embed.dtype) if not torch.is_tensor(gates) else gates.to(model.embed.dtype)
    cfg = model.cfg
    if g.shape[-2:] != (cfg.n_layers, cfg.n_heads):
        raise ContractError(f"gates must have shape ({cfg.n_layers}, {cfg.n_heads}), got {tuple(g.shape)}")
    if bool((g.detach() < 0).any()):
        raise ContractError("gates must be nonnegative")
    return g


def forward_loss(model: TransformerModel, gates, batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sequence mean next-token NLL over positions 1..T-1, and their mean."""
    tokens = torch.as_tensor(np.asarray(batch), dtype=torch.long) if not torch.is_tensor(batch) else batch.long()
    model.check_tokens(tokens)
    if tokens.shape[1] < 2:
        raise ContractError("sequences need at least two tokens")
    g = _as_gates(model, gates)
    logits = ad.evaluate(model, tokens[:, :-1], g, name="forward")
    ad.record_forward(tokens.shape[0])
    per_seq = ad.token_nll(logits, tokens[:, 1:]).mean(dim=1)
    return per_seq, per_seq.mean()


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 100
    grad_clip: float = 1.0
    seed: int = 7
    log_every: int = 50
    checkpoint_every: int = 0


def _lr_at(step: int, tc: TrainConfig) -> float:
    if step < tc.warmup:
        return tc.lr * (step + 1) / tc.warmup
    progress = (step - tc.warmup) / max(1, tc.steps - tc.warmup)
    return tc.lr * 0.5 * (1 + math.cos(math.pi * min(1.0, progress)))


def train_model(config: ModelConfig, corpora, train_config: TrainConfig, mix_weights: dict | None = None,
                checkpoint_dir=None) -> TransformerModel:
    """Train on a mixture of per-language corpora.

    corpora maps language id to Corpus. Each batch row picks its language by
    mix_weights (default: proportional to corpus size) and then a uniform
    sequence from that corpus.
    """
    ids = sorted(corpora)
    if not ids:
        raise ContractError("no training corpora given")
    tc = train_config
    model = TransformerModel(config)
    if tc.steps == 0:
        return model
    pools = [torch.as_tensor(corpora[i].sequences, dtype=torch.long) for i in ids]
    if mix_weights is None:
        weights = np.array([len(p) for p in pools], dtype=np.float64)
    else:
        weights = np.array([mix_weights[i] for i in ids], dtype=np.float64)
    weights /= weights.sum()
    rng = np.random.default_rng([tc.seed, 11])
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, betas=(0.9, 0.95), weight_decay=0.0)
    model.train()
    for step in range(tc.steps):
        langs = rng.choice(len(ids), size=tc.batch_size, p=weights)
        rows = [pools[li][int(rng.integers(len(pools[li])))] for li in langs]
        batch = torch.stack(rows)
        for group in opt.param_groups:
            group["lr"] = _lr_at(step, tc)
        _, loss = forward_loss(model, None, batch)
        if not math.isfinite(loss.item()):
            raise NumericError(f"training diverged at step {step}: loss {loss.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        opt.step()
        if step % tc.log_every == 0 or step == tc.steps - 1:
            model.loss_curve.append((step, loss.item()))
            log.info("step %d loss %.4f", step, loss.item())
        if checkpoint_dir is not None and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"step{step + 1:06d}.hlns")
    model.eval()
    return model


# ---------------------------------------------------------------------------
# sampling and probes

@torch.no_grad()
def generate(model: TransformerModel, gates, prompt: Sequence[int], n_tokens: int,
             temperature: float | None = None, seed: int = 0) -> list[int]:
    """Autoregressive continuation; greedy when temperature is None."""
    if len(prompt) + n_tokens > model.cfg.max_seq_len:
        raise ContractError("prompt plus continuation exceeds max_seq_len")
    g = _as_gates(model, gates)
    gen = torch.Generator().manual_seed(seed)
    toks = list(map(int, prompt))
    out = []
    for _ in range(n_tokens):
        logits = model(torch.tensor([toks]), g)[0, -1]
        if temperature is None:
            nxt = int(torch.argmax(logits))
        else:
            probs = torch.softmax(logits.double() / temperature, dim=-1)
            nxt = int(torch.multinomial(probs, 1, generator=gen))
        toks.append(nxt)
        out.append(nxt)
    return out


@torch.no_grad()
def next_token_logits(model: TransformerModel, gates, prompts: Sequence[Sequence[int]]) -> torch.Tensor:
    """Logits at the last position of each prompt (prompts may differ in length)."""
    g = _as_gates(model, gates)
    out = []
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    result = [None] * len(prompts)
    for n, idx in sorted(by_len.items()):
        toks = torch.tensor([list(prompts[i]) for i in idx], dtype=torch.long)
        logits = model(toks, g)[:, -1]
        ad.record_forward(len(idx))
        for j, i in enumerate(idx):
            result[i] = logits[j]
    out = torch.stack(result)
    return out


@torch.no_grad()
def logit_lens(model: TransformerModel, tokens: Sequence[int], registry, gates=None) -> np.ndarray:
    """Per-layer probability mass at the final position.

    Row l (0-based) reads the residual stream after layer l + 1 through the
    final norm and unembedding. Columns are the registry languages' content
    ranges in registry order, then one column for every other token (shared,
    special, keys, answers), so each row sums to 1.
    """
    g = _as_gates(model, gates)
    resids = model.residuals(torch.tensor([list(tokens)]), g)[1:]
    ranges = [s.content_range for s in registry.languages]
    rows = []
    for r in resids:
        probs = torch.softmax(model.project(r[:, -1]).double(), dim=-1)[0]
        row = [float(probs[lo:hi].sum()) for lo, hi in ranges]
        rows.append(row + [float(probs.sum()) - sum(row)])
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# checkpoints

_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def checkpoint_bytes(model: TransformerModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = asdict(model.cfg)
    buf.write(struct.pack(f"<{len(_CONFIG_FIELDS)}I", *(cfg[k] for k in _CONFIG_FIELDS)))
    for name, t in model.state_dict().items():
        raw = name.encode()
        arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(model: TransformerModel, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(model))


def model_from_bytes(data: bytes) -> TransformerModel:
    if data[:4] != MAGIC:
        raise ContractError("not a headlens checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    off = 8
    vals = struct.unpack_from(f"<{len(_CONFIG_FIELDS)}I", data, off)
    off += 4 * len(_CONFIG_FIELDS)
    model = TransformerModel(ModelConfig(**dict(zip(_CONFIG_FIELDS, vals))))
    state = {}
    while off < len(data):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode()
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = math.prod(dims)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model


def load_checkpoint(path) -> TransformerModel:
    return model_from_bytes(Path(path).read_bytes())


def model_fingerprint(model: TransformerModel) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()[:16]


def n_parameters(model: TransformerModel) -> int:
    return sum(p.numel() for p in model.parameters())
