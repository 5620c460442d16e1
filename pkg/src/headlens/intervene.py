"""Gate construction and the evaluation harnesses built on it.

perplexity / specificity_matrix   effect of removing heads on language modeling
conflict_eval / steering_sweep    which of two conflicting facts the model picks
offtarget_eval                    whether continuations stay in the prompt's language
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import ConflictError, ContractError
from .headsets import HeadSet, specific_heads
from .model import ModelConfig, TransformerModel, forward_loss, generate, next_token_logits
from .synth import classify_sequence_language, grammar_loglik
from .errors import IndeterminateLanguage

DEFAULT_GATE_SWEEP = (0.0, 2.0, 3.0, 5.0)


@dataclass
class GateAssignment:
    entries: list[tuple[HeadSet, float]] = field(default_factory=list)
    name: str = "vanilla"

    @classmethod
    def single(cls, heads: HeadSet, value: float, name: str | None = None) -> "GateAssignment":
        return cls([(heads, float(value))], name or f"{heads.label}x{value:g}")


def build_gates(config: ModelConfig, assignment: GateAssignment) -> torch.Tensor:
    """All-ones (n_layers, n_heads) gates with the assigned heads overwritten."""
    gates = torch.ones(config.n_layers, config.n_heads, dtype=torch.float64)
    owner: dict[tuple[int, int], str] = {}
    for heads, value in assignment.entries:
        if value < 0 or not math.isfinite(value):
            raise ContractError(f"gate value must be finite and >= 0, got {value}")
        for layer, head in heads:
            if not (0 <= layer < config.n_layers and 0 <= head < config.n_heads):
                raise ContractError(f"head ({layer}, {head}) is outside the model")
            if (layer, head) in owner:
                raise ConflictError(f"head ({layer}, {head}) assigned by both {owner[(layer, head)]!r} "
                                    f"and {heads.label!r}")
            owner[(layer, head)] = heads.label
            gates[layer, head] = value
    return gates


def deactivate(config: ModelConfig, heads: HeadSet) -> torch.Tensor:
    return build_gates(config, GateAssignment([(heads, 0.0)]))


def _seqs(corpus) -> torch.Tensor:
    seqs = torch.as_tensor(np.asarray(getattr(corpus, "sequences", corpus)), dtype=torch.long)
    if seqs.dim() != 2 or len(seqs) == 0:
        raise ContractError("corpus is empty")
    return seqs


@torch.no_grad()
def mean_nll(model: TransformerModel, gates, corpus, batch_size: int = 64) -> float:
    seqs = _seqs(corpus)
    total = 0.0
    for i in range(0, len(seqs), batch_size):
        per_seq, _ = forward_loss(model, gates, seqs[i:i + batch_size])
        total += float(per_seq.double().sum())
    return total / len(seqs)


def perplexity(model: TransformerModel, gates, corpus, batch_size: int = 64) -> float:
    # every sequence has the same length, so the mean of per-sequence means is the token mean
    return math.exp(mean_nll(model, gates, corpus, batch_size))


@dataclass
class PplReport:
    config: str
    perplexity: dict[int, float]
    fingerprints: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "perplexity": {str(k): v for k, v in self.perplexity.items()},
                "fingerprints": {str(k): v for k, v in self.fingerprints.items()}}


def ppl_report(model, gates, corpora: Mapping[int, object], config: str) -> PplReport:
    return PplReport(config, {i: perplexity(model, gates, c) for i, c in sorted(corpora.items())},
                     {i: c.fingerprint() for i, c in sorted(corpora.items()) if hasattr(c, "fingerprint")})


@dataclass
class SpecificityMatrix:
    labels: list[int]
    values: np.ndarray
    vanilla: dict[int, float]

    def diagonal_is_row_max(self) -> list[bool]:
        return [bool(self.values[i, i] >= self.values[i].max()) for i in range(len(self.labels))]

    def to_dict(self) -> dict:
        return {"labels": self.labels, "values": self.values.tolist(),
                "vanilla": {str(k): v for k, v in self.vanilla.items()}}

    def to_csv(self) -> str:
        lines = ["#lang=all", "#kind=specificity", f"#samples={len(self.labels)}",
                 "#labels=" + " ".join(map(str, self.labels))]
        lines += [",".join(repr(float(v)) for v in row) for row in self.values]
        return "\n".join(lines) + "\n"


def specificity_matrix(model: TransformerModel, heads: Mapping[int, HeadSet],
                       corpora: Mapping[int, object]) -> SpecificityMatrix:
    if sorted(heads) != sorted(corpora):
        raise ContractError("head sets and corpora must cover the same languages")
    labels = sorted(heads)
    vanilla = {j: perplexity(model, None, corpora[j]) for j in labels}
    values = np.zeros((len(labels), len(labels)))
    for a, i in enumerate(labels):
        if not len(heads[i]):
            continue
        gates = deactivate(model.cfg, heads[i])
        for b, j in enumerate(labels):
            values[a, b] = perplexity(model, gates, corpora[j]) - vanilla[j]
    return SpecificityMatrix(labels, values, vanilla)


# ---------------------------------------------------------------------------
# cross-lingual steering

@dataclass
class PreferenceReport:
    config: str
    context1: float
    context2: float
    other: float
    n_probes: int

    def to_dict(self) -> dict:
        return asdict(self)


def conflict_eval(model: TransformerModel, probes: Sequence, assignments: Sequence[GateAssignment],
                  answer_range: tuple[int, int]) -> list[PreferenceReport]:
    """Share of probes answered from context1, context2, or neither, per assignment."""
    if not probes:
        return [PreferenceReport(a.name, 0.0, 0.0, 0.0, 0) for a in assignments]
    prompts = [p.tokens() for p in probes]
    if max(map(len, prompts)) > model.cfg.max_seq_len:
        raise ContractError("probe longer than max_seq_len")
    lo, hi = answer_range
    reports = []
    for a in assignments:
        gates = build_gates(model.cfg, a)
        logits = next_token_logits(model, gates, prompts)[:, lo:hi]
        picks = (logits.argmax(dim=-1) + lo).tolist()
        c1 = sum(pick == p.v1 for pick, p in zip(picks, probes))
        c2 = sum(pick == p.v2 for pick, p in zip(picks, probes))
        n = len(probes)
        reports.append(PreferenceReport(a.name, c1 / n, c2 / n, (n - c1 - c2) / n, n))
    return reports


def steering_assignments(heads_a: HeadSet, heads_b: HeadSet,
                         gate_values: Sequence[float] = DEFAULT_GATE_SWEEP) -> list[GateAssignment]:
    """Vanilla, then each gate value: g > 1 enhances A's heads, g < 1 weakens B's."""
    out = [GateAssignment(name="vanilla")]
    for g in gate_values:
        if g > 1:
            out.append(GateAssignment([(heads_a, g)], f"enhance_A_x{g:g}"))
        elif g < 1:
            out.append(GateAssignment([(heads_b, g)], f"weaken_B_x{g:g}"))
    return out


@dataclass
class SteeringResult:
    lang_a: int
    lang_b: int
    reports: list[PreferenceReport]

    @property
    def vanilla(self) -> PreferenceReport:
        return self.reports[0]

    @property
    def best(self) -> PreferenceReport:
        return max(self.reports[1:], key=lambda r: (r.context1, -r.context2))

    @property
    def shift(self) -> float:
        return self.best.context1 - self.vanilla.context1

    def to_dict(self) -> dict:
        return {"lang_a": self.lang_a, "lang_b": self.lang_b, "reports": [r.to_dict() for r in self.reports],
                "best": self.best.config, "context1_shift": self.shift,
                "context2_shift": self.best.context2 - self.vanilla.context2}


def steering_sweep(model, probes, heads_a: HeadSet, heads_b: HeadSet, answer_range,
                   gate_values: Sequence[float] = DEFAULT_GATE_SWEEP) -> SteeringResult:
    reports = conflict_eval(model, probes, steering_assignments(heads_a, heads_b, gate_values), answer_range)
    return SteeringResult(probes[0].lang_a, probes[0].lang_b, reports)


# ---------------------------------------------------------------------------
# off-target generation

@dataclass
class OffTargetReport:
    config: str
    fraction: float | None
    accuracy: dict[int, float]
    quality: dict[int, float]
    suppressed: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"config": self.config, "fraction": self.fraction,
                "accuracy": {str(k): v for k, v in self.accuracy.items()},
                "quality": {str(k): v for k, v in self.quality.items()},
                "suppressed": self.suppressed}


def generation_report(model, gates, prompts: Mapping[int, Sequence[Sequence[int]]], registry,
                      n_tokens: int, config: str, fraction=None) -> OffTargetReport:
    acc, qual = {}, {}
    for lang, plist in sorted(prompts.items()):
        hits, ll = 0, []
        spec = registry[lang]
        for prompt in plist:
            cont = generate(model, gates, prompt, n_tokens)
            try:
                pred, _ = classify_sequence_language(cont, registry)
            except IndeterminateLanguage:
                pred = None
            hits += pred == lang
            ll.append(grammar_loglik(prompt, cont, spec, registry.vocab_size))
        acc[lang] = hits / len(plist)
        qual[lang] = float(np.mean(ll))
    return OffTargetReport(config, fraction, acc, qual)


def offtarget_eval(model: TransformerModel, dominant_language_id: int, suppress_fractions: Sequence[float],
                   prompts: Mapping[int, Sequence[Sequence[int]]], registry, dominant_matrix,
                   general: HeadSet | None = None, n_tokens: int = 12) -> list[OffTargetReport]:
    """Vanilla generation, then generation with the dominant language's heads gated to 0.

    The first report is vanilla; one report follows per suppression fraction.
    """
    general = general or HeadSet("general", [])
    reports = [generation_report(model, None, prompts, registry, n_tokens, "vanilla")]
    for f in suppress_fractions:
        heads = specific_heads(dominant_matrix, f, general)
        gates = deactivate(model.cfg, heads)
        rep = generation_report(model, gates, prompts, registry, n_tokens, f"suppress_{f:g}", f)
        rep.suppressed = [list(h) for h in heads]
        reports.append(rep)
    return reports


def save_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
