"""Head importance: exact ablation and the single-pass gradient estimator.

The exact score of a head is the mean loss increase when its gate is set to
zero. The estimator instead places an all-ones soft mask on the heads and
reads d(loss)/d(mask) from one forward and one backward pass per sequence:

    taylor(h) = mean_x |m_h * g_h(x)|
    wneg(h)   = mean_x 1[g_h(x) < 0]
    lahis(h)  = mean_x |m_h * g_h(x)| * 1[g_h(x) < 0]

A negative gradient means shrinking the head would raise the loss, so only
those samples count towards lahis.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .errors import ContractError, NumericError
from .model import TransformerModel, forward_loss

KINDS = ("exact", "taylor", "lahis", "wneg", "lahis_product")


@dataclass(eq=False)
class ImportanceMatrix:
    language_id: int
    kind: str
    scores: np.ndarray
    n_samples: int
    fingerprint: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown importance kind {self.kind!r}")
        self.scores = np.asarray(self.scores, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def to_csv(self) -> str:
        lines = [f"#lang={self.language_id}", f"#kind={self.kind}", f"#samples={self.n_samples}"]
        if self.fingerprint:
            lines.append(f"#fingerprint={self.fingerprint}")
        lines += [",".join(repr(float(v)) for v in row) for row in self.scores]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ImportanceMatrix":
        meta, rows = {}, []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                k, _, v = line[1:].partition("=")
                meta[k.strip()] = v.strip()
                continue
            try:
                rows.append([float(x) for x in line.split(",")])
            except ValueError:
                raise ContractError(f"line {lineno}: malformed matrix row") from None
            if len(rows[-1]) != len(rows[0]):
                raise ContractError(f"line {lineno}: expected {len(rows[0])} columns, got {len(rows[-1])}")
        if not rows:
            raise ContractError("matrix file has no rows")
        lang = meta.get("lang", "-1")
        return cls(int(lang) if lang.lstrip("-").isdigit() else -1, meta.get("kind", "lahis"),
                   np.asarray(rows), int(meta.get("samples", 0)), meta.get("fingerprint", ""))

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "ImportanceMatrix":
        return cls.from_csv(Path(path).read_text())


@dataclass
class NegFractionMatrix:
    values: np.ndarray
    n_samples: int

    def as_importance(self, language_id: int, fingerprint: str = "") -> ImportanceMatrix:
        return ImportanceMatrix(language_id, "wneg", self.values, self.n_samples, fingerprint)


@dataclass
class SoftHeadMask:
    """All-ones mask used only to read gradients; never optimized here."""

    values: torch.Tensor
    grad_sum: torch.Tensor = field(init=False)

    @classmethod
    def fresh(cls, n_layers: int, n_heads: int, dtype=torch.float64) -> "SoftHeadMask":
        return cls(torch.ones(n_layers, n_heads, dtype=dtype, requires_grad=True))

    def __post_init__(self):
        self.grad_sum = torch.zeros_like(self.values, dtype=torch.float64)


def _sequences(corpus) -> torch.Tensor:
    seqs = getattr(corpus, "sequences", corpus)
    seqs = torch.as_tensor(np.asarray(seqs), dtype=torch.long)
    if seqs.dim() != 2 or len(seqs) == 0:
        raise ContractError("corpus is empty")
    return seqs


def corpus_fingerprint(seqs: torch.Tensor) -> str:
    return hashlib.sha256(seqs.numpy().astype("<i8").tobytes()).hexdigest()[:16]


def _lang(corpus) -> int:
    return int(getattr(corpus, "language_id", -1))


@torch.no_grad()
def _per_sequence_losses(model, gates, seqs, batch_size) -> torch.Tensor:
    out = []
    for i in range(0, len(seqs), batch_size):
        per_seq, _ = forward_loss(model, gates, seqs[i:i + batch_size])
        out.append(per_seq.double())
    return torch.cat(out)


def exact_ablation_scores(model: TransformerModel, corpus, head_subset=None, batch_size: int = 64) -> ImportanceMatrix:
    """Mean loss increase from zeroing each head's gate.

    Heads outside head_subset are left as NaN. Scores may be negative.
    """
    seqs = _sequences(corpus)
    cfg = model.cfg
    dtype = model.embed.dtype
    heads = head_subset if head_subset is not None else [(l, h) for l in range(cfg.n_layers) for h in range(cfg.n_heads)]
    base = _per_sequence_losses(model, None, seqs, batch_size)
    scores = np.full((cfg.n_layers, cfg.n_heads), np.nan)
    for layer, head in heads:
        gates = torch.ones(cfg.n_layers, cfg.n_heads, dtype=dtype)
        gates[layer, head] = 0.0
        ablated = _per_sequence_losses(model, gates, seqs, batch_size)
        scores[layer, head] = float((ablated - base).mean())
    return ImportanceMatrix(_lang(corpus), "exact", scores, len(seqs), corpus_fingerprint(seqs))


def mask_gradients(model: TransformerModel, corpus):
    """Yield d(loss(x))/d(mask) for each sequence x, one forward+backward each."""
    seqs = _sequences(corpus)
    cfg = model.cfg
    frozen = [p for p in model.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        for x in seqs:
            mask = SoftHeadMask.fresh(cfg.n_layers, cfg.n_heads, dtype=model.embed.dtype)
            _, loss = forward_loss(model, mask.values, x[None])
            g = ad.gradients(loss, [mask.values])[mask.values]
            if not bool(torch.isfinite(g).all()):
                raise NumericError("non-finite mask gradient")
            yield mask.values.detach(), g.double()
    finally:
        for p in frozen:
            p.requires_grad_(True)


def lahis_scores(model: TransformerModel, corpus) -> tuple[ImportanceMatrix, ImportanceMatrix, NegFractionMatrix]:
    """Single-pass importance: (lahis, taylor, wneg) matrices."""
    seqs = _sequences(corpus)
    cfg = model.cfg
    taylor = torch.zeros(cfg.n_layers, cfg.n_heads, dtype=torch.float64)
    fused = torch.zeros_like(taylor)
    neg = torch.zeros_like(taylor)
    for m, g in mask_gradients(model, seqs):
        mag = (m.double() * g).abs()
        is_neg = (g < 0).double()
        taylor += mag
        fused += mag * is_neg
        neg += is_neg
    n = len(seqs)
    fp = corpus_fingerprint(seqs)
    lang = _lang(corpus)
    return (ImportanceMatrix(lang, "lahis", (fused / n).numpy(), n, fp),
            ImportanceMatrix(lang, "taylor", (taylor / n).numpy(), n, fp),
            NegFractionMatrix((neg / n).numpy(), n))


def lahis_product(taylor: ImportanceMatrix, wneg: NegFractionMatrix) -> ImportanceMatrix:
    """The taylor * wneg variant, for comparison with the fused score."""
    return ImportanceMatrix(taylor.language_id, "lahis_product", taylor.scores * wneg.values,
                            taylor.n_samples, taylor.fingerprint)


def spearman(a, b) -> float:
    from scipy.stats import spearmanr
    return float(spearmanr(np.ravel(a), np.ravel(b)).statistic)
