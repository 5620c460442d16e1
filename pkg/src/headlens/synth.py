"""Synthetic languages, corpora, conflict probes and an exact language oracle.

Each language owns a disjoint block of content token ids and a transition
matrix over its content tokens plus a shared set of function tokens. The
grammar is lagged: token t is drawn from the row of token t - lag, with a
language-specific lag (a crude stand-in for word order). Facts are written
"<fact-marker> key ... value" with the value exactly lag - 1 positions after
the key, so the same attention offset serves both grammar and recall.

Token layout (ids):
    0                 BOS
    1                 QUERY marker (language neutral)
    2                 SUMMARY marker (language neutral)
    3 ..              shared function tokens
    ..                key tokens (shared)
    ..                answer tokens (shared)
    ..                content blocks, one per language; the first id of each
                      block is that language's fact marker
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, IndeterminateLanguage

BOS = 0
QUERY = 1
SUMMARY = 2
N_SPECIAL = 3


@dataclass(frozen=True)
class GeneratorConfig:
    summary_rate: float = 0.25  # fraction of sequences carrying a summary episode
    switch_rate: float = 0.5  # chance a non-dominant summary continues in the dominant language
    min_facts: int = 3
    max_facts: int = 6
    requery_rate: float = 0.5  # chance each fact is queried a second time
    run_extra: int = 2  # neutral run after SUMMARY is max_lag + [0, run_extra]
    min_continuation: int = 8
    max_continuation: int = 14
    primary_share: tuple = (0.3, 0.9)  # training text: share of tokens from the sequence's own language

    def __post_init__(self):
        object.__setattr__(self, "primary_share", tuple(float(x) for x in self.primary_share))


@dataclass(eq=False)
class LanguageSpec:
    id: int
    content_range: tuple[int, int]
    shared_tokens: list[int]
    bigram: np.ndarray
    mix_weight: float
    lag: int
    initial: np.ndarray

    def __post_init__(self):
        self.content_range = (int(self.content_range[0]), int(self.content_range[1]))
        self.bigram = np.asarray(self.bigram, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.states = np.concatenate([np.arange(*self.content_range), np.asarray(self.shared_tokens, dtype=np.int64)])
        self._index = {int(t): i for i, t in enumerate(self.states)}
        self._cdf = np.cumsum(self.bigram, axis=1)
        self._init_cdf = np.cumsum(self.initial)

    @property
    def fact_marker(self) -> int:
        return self.content_range[0]

    def in_content(self, token: int) -> bool:
        return self.content_range[0] <= token < self.content_range[1]

    def state_index(self, token: int) -> int | None:
        return self._index.get(int(token))

    def next_distribution(self, history) -> np.ndarray:
        """Distribution over self.states for the token following history."""
        if len(history) >= self.lag:
            i = self._index.get(int(history[-self.lag]))
            if i is not None:
                return self.bigram[i]
        return self.initial

    def sample_next(self, history, rng: np.random.Generator) -> int:
        cdf = self._init_cdf
        if len(history) >= self.lag:
            i = self._index.get(int(history[-self.lag]))
            if i is not None:
                cdf = self._cdf[i]
        j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return int(self.states[min(j, len(self.states) - 1)])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "content_range": list(self.content_range),
            "shared_tokens": list(map(int, self.shared_tokens)),
            "bigram": self.bigram.tolist(),
            "mix_weight": self.mix_weight,
            "lag": self.lag,
            "initial": self.initial.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LanguageSpec":
        return cls(d["id"], tuple(d["content_range"]), list(d["shared_tokens"]),
                   np.asarray(d["bigram"]), d["mix_weight"], d["lag"], np.asarray(d["initial"]))


@dataclass(eq=False)
class Registry:
    vocab_size: int
    seed: int
    languages: list[LanguageSpec]
    shared_tokens: list[int]
    key_range: tuple[int, int]
    answer_range: tuple[int, int]
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    dominant: int = 0

    def __post_init__(self):
        lookup = np.full(self.vocab_size, -1, dtype=np.int64)
        for spec in self.languages:
            lookup[spec.content_range[0]:spec.content_range[1]] = spec.id
        self.language_lookup = lookup

    def __getitem__(self, language_id: int) -> LanguageSpec:
        for spec in self.languages:
            if spec.id == language_id:
                return spec
        raise ContractError(f"language {language_id} not in registry")

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.languages]

    @property
    def max_lag(self) -> int:
        return max(s.lag for s in self.languages)

    def to_json(self) -> str:
        doc = {
            "vocab_size": self.vocab_size,
            "seed": self.seed,
            "dominant": self.dominant,
            "shared_tokens": self.shared_tokens,
            "key_range": list(self.key_range),
            "answer_range": list(self.answer_range),
            "generator": asdict(self.generator),
            "languages": [s.to_dict() for s in self.languages],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Registry":
        d = json.loads(text)
        return cls(d["vocab_size"], d["seed"], [LanguageSpec.from_dict(s) for s in d["languages"]],
                   d["shared_tokens"], tuple(d["key_range"]), tuple(d["answer_range"]),
                   GeneratorConfig(**d["generator"]), d["dominant"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Registry":
        return cls.from_json(Path(path).read_text())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def make_registry(n_languages: int = 5, vocab_size: int = 512, answer_range_size: int = 16, seed: int = 7, *,
                  n_shared: int = 16, n_keys: int = 16, dominant_weight: float = 0.6, lags=None,
                  concentration: float = 0.3, shared_rate: float = 0.05,
                  generator: GeneratorConfig | None = None) -> Registry:
    if n_languages < 1:
        raise ConfigError("need at least one language")
    start = N_SPECIAL
    shared = list(range(start, start + n_shared))
    key_range = (start + n_shared, start + n_shared + n_keys)
    answer_range = (key_range[1], key_range[1] + answer_range_size)
    block = (vocab_size - answer_range[1]) // n_languages
    if block < 8:
        raise ConfigError(f"vocab_size {vocab_size} too small for {n_languages} languages")
    if lags is None:
        lags = [2 + i for i in range(n_languages)]
    if len(lags) != n_languages or min(lags) < 2:
        raise ConfigError("need one lag >= 2 per language")
    if n_languages == 1:
        weights = [1.0]
    else:
        if not 0 < dominant_weight < 1:
            raise ConfigError("dominant_weight must lie in (0, 1)")
        rest = (1.0 - dominant_weight) / (n_languages - 1)
        weights = [dominant_weight] + [rest] * (n_languages - 1)

    languages = []
    for i in range(n_languages):
        lo = answer_range[1] + i * block
        rng = np.random.default_rng([seed, i])
        n_states = block + n_shared

        def row():
            content = rng.dirichlet(np.full(block, concentration))
            content[0] = 0.0  # never emit the fact marker from the chain
            content /= content.sum()
            r = np.concatenate([(1 - shared_rate) * content, shared_rate * rng.dirichlet(np.ones(n_shared))])
            return r / r.sum()

        bigram = np.stack([row() for _ in range(n_states)])
        initial = row()
        languages.append(LanguageSpec(i, (lo, lo + block), shared, bigram, weights[i], int(lags[i]), initial))
    return Registry(vocab_size, seed, languages, shared, key_range, answer_range,
                    generator or GeneratorConfig())


# ---------------------------------------------------------------------------
# corpora

@dataclass(eq=False)
class Corpus:
    language_id: int
    sequences: np.ndarray
    seed: int

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def seq_len(self) -> int:
        return int(self.sequences.shape[1])

    def to_text(self) -> str:
        lines = [f"#lang={self.language_id} seed={self.seed} seq_len={self.seq_len}"]
        lines += [" ".join(map(str, row)) for row in self.sequences.tolist()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Corpus":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ContractError("corpus file lacks a header line")
        fields = dict(kv.split("=", 1) for kv in lines[0][1:].split())
        rows = [list(map(int, ln.split())) for ln in lines[1:] if ln.strip()]
        seq_len = int(fields["seq_len"])
        seqs = np.asarray(rows, dtype=np.int64).reshape(len(rows), seq_len)
        return cls(int(fields["lang"]), seqs, int(fields["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Corpus":
        return cls.from_text(Path(path).read_text())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def subset(self, n: int) -> "Corpus":
        return Corpus(self.language_id, self.sequences[:n], self.seed)


class _Writer:
    def __init__(self, rng: np.random.Generator, tokens=None):
        self.rng = rng
        self.tokens: list[int] = list(tokens) if tokens is not None else [BOS]

    def text(self, source, n: int) -> None:
        for _ in range(n):
            self.tokens.append(source.sample_next(self.tokens, self.rng))

    def fact(self, spec: LanguageSpec, key: int, value: int, source=None) -> None:
        self.tokens += [spec.fact_marker, key]
        self.text(source or spec, spec.lag - 2)
        self.tokens.append(value)

    def query(self, key: int, value: int | None = None) -> None:
        self.tokens += [QUERY, key]
        if value is not None:
            self.tokens.append(value)

    def neutral(self, shared: list[int], n: int) -> None:
        self.tokens += [int(t) for t in self.rng.choice(shared, size=n)]


class _Mixture:
    """Token-level code-mixing: each token comes from one language, drawn by weight."""

    def __init__(self, specs: list[LanguageSpec], weights: np.ndarray):
        self.specs = specs
        self.cdf = np.cumsum(weights / weights.sum())

    def sample_next(self, history, rng: np.random.Generator) -> int:
        i = min(int(np.searchsorted(self.cdf, rng.random(), side="right")), len(self.specs) - 1)
        return self.specs[i].sample_next(history, rng)


def _background(reg: Registry, spec: LanguageSpec, rng, code_mix: bool):
    """Source of running text: the language itself, or a mix led by it."""
    if not code_mix or len(reg.languages) == 1:
        return spec
    lo, hi = reg.generator.primary_share
    share = rng.uniform(lo, hi)
    others = [s for s in reg.languages if s.id != spec.id]
    rest = rng.dirichlet(np.ones(len(others))) * (1.0 - share)
    return _Mixture([spec] + others, np.concatenate([[share], rest]))


def _summary_sequence(reg: Registry, spec: LanguageSpec, seq_len: int, rng, code_mix: bool = False) -> list[int]:
    g = reg.generator
    run = reg.max_lag + int(rng.integers(0, g.run_extra + 1))
    cont = int(rng.integers(g.min_continuation, g.max_continuation + 1))
    w = _Writer(rng)
    w.text(_background(reg, spec, rng, code_mix), seq_len - 1 - 1 - run - cont)
    w.tokens.append(SUMMARY)
    w.neutral(reg.shared_tokens, run)
    target = spec
    if spec.id != reg.dominant and rng.random() < g.switch_rate:
        target = reg[reg.dominant]
    w.text(_background(reg, target, rng, code_mix), seq_len - len(w.tokens))
    return w.tokens


def _recall_sequence(reg: Registry, spec: LanguageSpec, seq_len: int, rng, code_mix: bool = False) -> list[int]:
    g = reg.generator
    # keep every fact and its query inside the window
    fit = max(1, (seq_len - 8) // (spec.lag + 7))
    n_facts = min(int(rng.integers(g.min_facts, g.max_facts + 1)), fit)
    keys = rng.choice(np.arange(*reg.key_range), size=n_facts, replace=False)
    values = rng.choice(np.arange(*reg.answer_range), size=n_facts, replace=False)
    src = _background(reg, spec, rng, code_mix)
    w = _Writer(rng)
    w.text(src, int(rng.integers(2, 6)))
    for k, v in zip(keys, values):
        w.fact(spec, int(k), int(v), src)
        w.text(src, int(rng.integers(1, 3)))
    asked = list(rng.permutation(n_facts))
    asked += [j for j in rng.permutation(n_facts) if rng.random() < g.requery_rate]
    for j in asked:
        w.query(int(keys[j]), int(values[j]))
        w.text(src, int(rng.integers(0, 2)))
    if len(w.tokens) < seq_len:
        w.text(src, seq_len - len(w.tokens))
    return w.tokens[:seq_len]


def sample_corpus(registry: Registry, language_id: int, n_sequences: int, seq_len: int, seed: int, *,
                  code_mix: bool = False) -> Corpus:
    """Sequences in one language.

    With code_mix (used for training data) the running text is a token-level
    mix of all languages led by this one, so every context needs every
    language's lag offset at once. Facts, queries and markers are unchanged.
    """
    spec = registry[language_id]
    min_len = 2 + registry.max_lag + registry.generator.run_extra + registry.generator.max_continuation + 8
    if seq_len < min_len:
        raise ConfigError(f"seq_len must be at least {min_len}")
    rng = np.random.default_rng([seed, language_id, 1])
    rows = []
    for _ in range(n_sequences):
        if rng.random() < registry.generator.summary_rate:
            rows.append(_summary_sequence(registry, spec, seq_len, rng, code_mix))
        else:
            rows.append(_recall_sequence(registry, spec, seq_len, rng, code_mix))
    return Corpus(language_id, np.asarray(rows, dtype=np.int64).reshape(n_sequences, seq_len), seed)


def sample_mixed_corpus(registry: Registry, total_sequences: int, seq_len: int, seed: int) -> dict[int, Corpus]:
    """Per-language corpora whose sizes follow the registry mix weights."""
    out = {}
    for spec in registry.languages:
        n = max(1, int(round(spec.mix_weight * total_sequences)))
        out[spec.id] = sample_corpus(registry, spec.id, n, seq_len, seed)
    return out


# ---------------------------------------------------------------------------
# probes

@dataclass
class ProbeInstance:
    context1_tokens: list[int]
    filler_tokens: list[int]
    context2_tokens: list[int]
    query_tokens: list[int]
    v1: int
    v2: int
    lang_a: int
    lang_b: int

    def tokens(self) -> list[int]:
        return [BOS] + self.context1_tokens + self.filler_tokens + self.context2_tokens + self.query_tokens


def make_probe_set(registry: Registry, lang_a: int, lang_b: int, n: int, seed: int, *,
                   filler_len: int = 4) -> list[ProbeInstance]:
    if lang_a == lang_b:
        raise ContractError("conflict probes need two different languages")
    spec_a, spec_b = registry[lang_a], registry[lang_b]
    rng = np.random.default_rng([seed, lang_a, lang_b, 2])
    keys = np.arange(*registry.key_range)
    answers = np.arange(*registry.answer_range)
    probes = []
    for _ in range(n):
        k = int(rng.choice(keys))
        v1, v2 = (int(x) for x in rng.choice(answers, size=2, replace=False))
        w = _Writer(rng)
        w.text(spec_a, 3)
        w.fact(spec_a, k, v1)
        w.text(spec_a, 2)
        c1 = w.tokens[1:]
        mark = len(w.tokens)
        w.neutral(registry.shared_tokens, filler_len)
        filler = w.tokens[mark:]
        mark = len(w.tokens)
        w.text(spec_b, 3)
        w.fact(spec_b, k, v2)
        w.text(spec_b, 2)
        c2 = w.tokens[mark:]
        probes.append(ProbeInstance(c1, filler, c2, [QUERY, k], v1, v2, lang_a, lang_b))
    return probes


@dataclass
class RecallProbe:
    tokens: list[int]
    answer: int
    key: int
    language_id: int


def make_recall_probes(registry: Registry, language_id: int, n: int, seed: int, *, n_facts: int = 4,
                       parity: int | None = None) -> list[RecallProbe]:
    """Single-language in-context recall questions.

    With parity set, only (key, answer) pairs with (key + answer) % 2 == parity
    are queried, which keeps train and test splits disjoint.
    """
    spec = registry[language_id]
    rng = np.random.default_rng([seed, language_id, 3])
    keys = np.arange(*registry.key_range)
    answers = np.arange(*registry.answer_range)
    out = []
    while len(out) < n:
        ks = rng.choice(keys, size=n_facts, replace=False)
        vs = rng.choice(answers, size=n_facts, replace=False)
        j = int(rng.integers(n_facts))
        if parity is not None and (int(ks[j]) + int(vs[j])) % 2 != parity:
            continue
        w = _Writer(rng)
        w.text(spec, int(rng.integers(2, 6)))
        for k, v in zip(ks, vs):
            w.fact(spec, int(k), int(v))
            w.text(spec, int(rng.integers(1, 4)))
        w.query(int(ks[j]))
        out.append(RecallProbe(w.tokens, int(vs[j]), int(ks[j]), language_id))
    return out


def make_summary_prompts(registry: Registry, language_id: int, n: int, seed: int, *,
                         prefix_len: int = 24) -> list[list[int]]:
    """Prompts ending in SUMMARY plus a neutral run, ready for continuation."""
    spec = registry[language_id]
    rng = np.random.default_rng([seed, language_id, 4])
    prompts = []
    for _ in range(n):
        w = _Writer(rng)
        w.text(spec, prefix_len)
        w.tokens.append(SUMMARY)
        w.neutral(registry.shared_tokens, registry.max_lag)
        prompts.append(w.tokens)
    return prompts


# ---------------------------------------------------------------------------
# oracles

def classify_sequence_language(tokens, registry: Registry) -> tuple[int, float]:
    """Majority vote over content tokens; ties go to the smallest language id."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size == 0:
        raise ContractError("cannot classify an empty sequence")
    toks = toks[(toks >= 0) & (toks < registry.vocab_size)]
    langs = registry.language_lookup[toks]
    langs = langs[langs >= 0]
    if langs.size == 0:
        raise IndeterminateLanguage("no content tokens present")
    ids = registry.ids
    counts = np.array([np.count_nonzero(langs == i) for i in ids])
    best = int(np.argmax(counts))
    return ids[best], float(counts[best] / langs.size)


def grammar_loglik(history, continuation, spec: LanguageSpec, vocab_size: int, eps: float = 1e-4) -> float:
    """Mean per-token log-likelihood of continuation under the language's grammar.

    The grammar is smoothed with eps/vocab_size so off-language tokens are
    penalized heavily but finitely.
    """
    toks = list(history)
    total = 0.0
    for t in continuation:
        p = 0.0
        i = spec.state_index(t)
        if i is not None:
            p = float(spec.next_distribution(toks)[i])
        total += np.log((1 - eps) * p + eps / vocab_size)
        toks.append(int(t))
    return total / max(1, len(continuation))
