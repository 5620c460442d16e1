"""Lightweight adaptation: train gates on a handful of heads, model frozen.

The mask multiplies head outputs before W_O, exactly like the intervention
gates. Only entries on the chosen head set move; everything else stays at 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import autodiff as ad
from .errors import ContractError, NumericError
from .headsets import HeadSet, all_heads, random_heads
from .model import ModelConfig, TransformerModel
from .synth import RecallProbe, make_recall_probes


@dataclass(eq=False)
class LanguageHeadMask:
    values: torch.Tensor
    trainable: torch.Tensor
    language: str
    provenance: dict = field(default_factory=dict)

    @property
    def n_trainable(self) -> int:
        return int(self.trainable.sum())

    def copy(self) -> "LanguageHeadMask":
        return LanguageHeadMask(self.values.detach().clone(), self.trainable.clone(), self.language,
                                json.loads(json.dumps(self.provenance)))

    def to_json(self) -> str:
        doc = {"language": self.language, "values": self.values.tolist(),
               "trainable": self.trainable.tolist(), "provenance": self.provenance}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "LanguageHeadMask":
        d = json.loads(text)
        return cls(torch.tensor(d["values"], dtype=torch.float64), torch.tensor(d["trainable"], dtype=torch.bool),
                   d["language"], d.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "LanguageHeadMask":
        return cls.from_json(Path(path).read_text())


@dataclass
class AdaptTask:
    language_id: int
    train: list[RecallProbe]
    test: list[RecallProbe]


def make_adapt_task(registry, language_id: int, n_train: int = 200, n_test: int = 800, seed: int = 0,
                    n_facts: int = 4) -> AdaptTask:
    """Recall QA splits; train queries pairs with even key+answer, test odd."""
    train = make_recall_probes(registry, language_id, n_train, seed, n_facts=n_facts, parity=0)
    test = make_recall_probes(registry, language_id, n_test, seed + 1, n_facts=n_facts, parity=1)
    return AdaptTask(language_id, train, test)


def init_mask(config: ModelConfig, headset: HeadSet) -> LanguageHeadMask:
    if not len(headset):
        raise ContractError("cannot build a mask from an empty head set")
    trainable = torch.zeros(config.n_layers, config.n_heads, dtype=torch.bool)
    for layer, head in headset:
        if not (0 <= layer < config.n_layers and 0 <= head < config.n_heads):
            raise ContractError(f"head ({layer}, {head}) is outside the model")
        trainable[layer, head] = True
    return LanguageHeadMask(torch.ones(config.n_layers, config.n_heads, dtype=torch.float64), trainable,
                            headset.label, {"heads": [list(h) for h in headset.members],
                                            "fraction": headset.fraction})


def random_mask(config: ModelConfig, n: int, seed: int) -> LanguageHeadMask:
    heads = random_heads(n, all_heads(config.n_layers, config.n_heads), None, seed)
    return init_mask(config, heads)


def _answer_logits(model: TransformerModel, gates: torch.Tensor, probes: Sequence[RecallProbe]) -> torch.Tensor:
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(probes):
        by_len.setdefault(len(p.tokens), []).append(i)
    rows: list = [None] * len(probes)
    for _, idx in sorted(by_len.items()):
        toks = torch.tensor([probes[i].tokens for i in idx], dtype=torch.long)
        logits = model(toks, gates)[:, -1]
        ad.record_forward(len(idx))
        for j, i in enumerate(idx):
            rows[i] = logits[j]
    return torch.stack(rows)


def train_mask(model: TransformerModel, mask: LanguageHeadMask, task: AdaptTask, epochs: int = 2,
               lr: float = 0.05, seed: int = 0, batch_size: int = 8) -> LanguageHeadMask:
    """Plain gradient descent on answer cross-entropy over the trainable entries."""
    out = mask.copy()
    out.provenance.update({"epochs": epochs, "lr": lr, "seed": seed, "batch_size": batch_size,
                           "n_train": len(task.train)})
    if epochs == 0:
        return out
    if not task.train:
        raise ContractError("empty training split")
    dtype = model.embed.dtype
    params = [p for p in model.parameters() if p.requires_grad]
    for p in params:
        p.requires_grad_(False)
    rng = np.random.default_rng([seed, 13])
    free = out.trainable.to(torch.float64)
    try:
        for _ in range(epochs):
            order = rng.permutation(len(task.train))
            for i in range(0, len(order), batch_size):
                batch = [task.train[j] for j in order[i:i + batch_size]]
                gates = out.values.to(dtype).clone().requires_grad_(True)
                logits = _answer_logits(model, gates, batch)
                target = torch.tensor([p.answer for p in batch])
                loss = F.cross_entropy(logits, target)
                if not math.isfinite(loss.item()):
                    raise NumericError("mask training diverged")
                grad = ad.gradients(loss, [gates])[gates].to(torch.float64)
                with torch.no_grad():
                    vals = out.values - lr * grad * free
                    vals = torch.where(out.trainable, vals.clamp_min(0.0), torch.ones_like(vals))
                out.values = vals
    finally:
        for p in params:
            p.requires_grad_(True)
    return out


@torch.no_grad()
def eval_accuracy(model: TransformerModel, mask: LanguageHeadMask | None, split: Sequence[RecallProbe]) -> float:
    if not split:
        raise ContractError("empty evaluation split")
    gates = None if mask is None else mask.values.to(model.embed.dtype)
    if gates is not None and gates.shape != (model.cfg.n_layers, model.cfg.n_heads):
        raise ContractError("mask shape does not match the model")
    logits = _answer_logits(model, gates, split)
    hits = sum(int(logits[i].argmax()) == p.answer for i, p in enumerate(split))
    return hits / len(split)
