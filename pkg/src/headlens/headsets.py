"""Selecting heads from importance matrices.

Language-general heads are those in every language's top set. Language-specific
heads are one language's top set with the general heads removed. How much the
general heads matter still varies by language; nothing here weights them
per language.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

HeadId = tuple[int, int]


@dataclass(eq=False)
class HeadSet:
    label: str
    members: list[HeadId]
    fraction: float | None = None
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.members = sorted({(int(l), int(h)) for l, h in self.members})

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, head) -> bool:
        return tuple(head) in set(self.members)

    def __eq__(self, other) -> bool:
        return isinstance(other, HeadSet) and self.members == other.members and self.label == other.label

    def to_json(self) -> str:
        doc = {"label": self.label, "fraction": self.fraction, "seed": self.seed,
               "members": [list(m) for m in self.members], "provenance": self.provenance}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "HeadSet":
        d = json.loads(text)
        return cls(d["label"], [tuple(m) for m in d["members"]], d.get("fraction"), d.get("seed"),
                   d.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "HeadSet":
        return cls.from_json(Path(path).read_text())


def n_selected(n_heads_total: int, fraction: float) -> int:
    return max(1, math.floor(fraction * n_heads_total + 1e-9))


def ranked_heads(scores: np.ndarray) -> list[HeadId]:
    """All heads ordered by (score desc, layer asc, head asc)."""
    n_l, n_h = scores.shape
    return sorted(((l, h) for l in range(n_l) for h in range(n_h)), key=lambda x: (-scores[x], x[0], x[1]))


def top_fraction(matrix, fraction: float) -> HeadSet:
    if not 0 < fraction <= 1:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    scores = np.asarray(matrix.scores)
    k = n_selected(scores.size, fraction)
    members = ranked_heads(scores)[:k]
    return HeadSet(str(matrix.language_id), members, fraction,
                   provenance={"sources": [matrix.fingerprint], "kind": matrix.kind})


def general_heads(matrices: Sequence, fraction: float) -> HeadSet:
    if len(matrices) < 2:
        raise ContractError("general heads need at least two languages")
    shape = np.shape(matrices[0].scores)
    if any(np.shape(m.scores) != shape for m in matrices):
        raise ContractError("importance matrices differ in shape")
    common = set(top_fraction(matrices[0], fraction).members)
    for m in matrices[1:]:
        common &= set(top_fraction(m, fraction).members)
    return HeadSet("general", list(common), fraction,
                   provenance={"sources": [m.fingerprint for m in matrices],
                               "languages": [m.language_id for m in matrices]})


def sweep_general(matrices: Sequence, fractions: Iterable[float]) -> tuple[HeadSet, dict]:
    """Smallest fraction whose intersection is nonempty (else the largest tried)."""
    tried = {}
    chosen = None
    for f in sorted(fractions):
        hs = general_heads(matrices, f)
        tried[repr(f)] = len(hs)
        if chosen is None and len(hs):
            chosen = hs
    if chosen is None:
        chosen = general_heads(matrices, max(fractions))
    chosen.provenance["sweep"] = tried
    return chosen, tried


def specific_heads(matrix, fraction: float, general: HeadSet) -> HeadSet:
    top = top_fraction(matrix, fraction)
    excluded = set(general.members)
    members = [m for m in top.members if m not in excluded]
    if not members:
        log.warning("language %s: every top head is general; specific set is empty", matrix.language_id)
    prov = dict(top.provenance, general=[list(m) for m in general.members])
    return HeadSet(str(matrix.language_id), members, fraction, provenance=prov)


def all_heads(n_layers: int, n_heads: int) -> list[HeadId]:
    return [(l, h) for l in range(n_layers) for h in range(n_heads)]


def random_heads(n: int, universe: Sequence[HeadId], exclude: HeadSet | Iterable[HeadId] | None, seed: int) -> HeadSet:
    excluded = set(exclude.members if isinstance(exclude, HeadSet) else (exclude or []))
    pool = sorted(set(map(tuple, universe)) - excluded)
    if n > len(pool):
        raise ContractError(f"cannot draw {n} heads from a pool of {len(pool)}")
    rng = np.random.default_rng([seed, 5])
    picks = rng.choice(len(pool), size=n, replace=False)
    return HeadSet("random", [pool[i] for i in picks], seed=seed, provenance={"excluded": len(excluded)})
