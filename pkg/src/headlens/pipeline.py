"""End-to-end experiment: corpora -> model -> scores -> head sets -> interventions.

Every stage writes plain files under one output directory. Nothing in the tree
depends on wall-clock time, so two runs with the same configuration produce
byte-identical trees.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import adapt, heatmap, intervene, lahis
from . import autodiff as ad
from . import headsets as hs
from . import synth
from .model import ModelConfig, TrainConfig, TransformerModel, load_checkpoint, logit_lens, model_fingerprint, \
    save_checkpoint, train_model

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "headlens-run"
    # languages
    n_languages: int = 5
    answer_range_size: int = 16
    concentration: float = 0.05
    dominant_weight: float = 0.6
    tokens_per_language: int = 200_000
    # model and training
    model: ModelConfig = field(default_factory=ModelConfig)
    # higher peak lr and 3x the steps of the library default; the lagged
    # grammars of the minority languages are not learned in 2k steps at 3e-4
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=6000, lr=1.5e-3, log_every=250))
    # scoring and evaluation sizes
    score_sequences: int = 64
    eval_sequences: int = 256
    random_sets: int = 20
    probes_per_pair: int = 200
    offtarget_prompts: int = 100
    offtarget_tokens: int = 12
    adapt_train: int = 200
    adapt_test: int = 800
    adapt_random_masks: int = 5
    # selection and interventions
    specific_fraction: float = 0.02
    general_sweep: tuple = (0.05, 0.1, 0.2)
    suppress_fractions: tuple = (0.01, 0.05)
    gate_sweep: tuple = (0.0, 2.0, 3.0, 5.0)
    adapt_fraction: float = 0.02
    adapt_epochs: int = 2
    adapt_lr: float = 0.05

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        for name in ("general_sweep", "suppress_fractions", "gate_sweep"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        fracs = [self.specific_fraction, self.adapt_fraction, *self.general_sweep, *self.suppress_fractions]
        if any(not 0 < f <= 1 for f in fracs):
            raise ValueError("all fractions must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out_dir")
        d["general_sweep"] = list(self.general_sweep)
        d["suppress_fractions"] = list(self.suppress_fractions)
        d["gate_sweep"] = list(self.gate_sweep)
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.summary: dict = {"config_fingerprint": cfg.fingerprint(), "seed": cfg.seed}

    def _report(self, name: str, obj: dict) -> None:
        stamp = {"config_fingerprint": self.cfg.fingerprint(), "seed": self.cfg.seed,
                 "model_fingerprint": self.summary.get("model_fingerprint", "")}
        _write_json(self.out / "reports" / name, dict(obj, provenance=stamp))

    # -- stages ------------------------------------------------------------
    def make_data(self) -> None:
        cfg = self.cfg
        self.registry = synth.make_registry(cfg.n_languages, cfg.model.vocab_size, cfg.answer_range_size, cfg.seed,
                                            dominant_weight=cfg.dominant_weight, concentration=cfg.concentration)
        self.registry.save(self.out / "registry.json")
        seq_len = cfg.model.max_seq_len
        n_train = cfg.tokens_per_language // seq_len
        self.train_corpora, self.eval_corpora, self.score_corpora = {}, {}, {}
        for lang in self.registry.ids:
            for split, store, n, offset in (("train", self.train_corpora, n_train, 0),
                                             ("eval", self.eval_corpora, cfg.eval_sequences, 1000),
                                             ("score", self.score_corpora, cfg.score_sequences, 2000)):
                c = synth.sample_corpus(self.registry, lang, n, seq_len, cfg.seed + offset, code_mix=split == "train")
                c.save(self.out / "corpora" / f"{split}_{lang}.txt")
                store[lang] = c

    def train(self) -> None:
        cfg = self.cfg
        weights = {s.id: s.mix_weight for s in self.registry.languages}
        self.model = train_model(cfg.model, self.train_corpora, cfg.train, weights)
        save_checkpoint(self.model, self.out / "model" / "model.hlns")
        lines = ["step,loss"] + [f"{s},{l!r}" for s, l in self.model.loss_curve]
        (self.out / "model" / "loss_curve.csv").write_text("\n".join(lines) + "\n")
        # reload so every later stage sees exactly the archived weights
        self.model = load_checkpoint(self.out / "model" / "model.hlns")
        self.model64 = self.model.clone(torch.float64)
        self.summary["model_fingerprint"] = model_fingerprint(self.model)

    def score(self) -> None:
        out = self.out / "scores"
        out.mkdir(parents=True, exist_ok=True)
        self.lahis, self.exact = {}, {}
        fidelity, passes = {}, {}
        for lang, corpus in self.score_corpora.items():
            with ad.track_passes() as p_est:
                lh, tay, wneg = lahis.lahis_scores(self.model64, corpus)
            with ad.track_passes() as p_ex:
                ex = lahis.exact_ablation_scores(self.model64, corpus)
            for m in (lh, tay, wneg.as_importance(lang, lh.fingerprint), lahis.lahis_product(tay, wneg), ex):
                m.save(out / f"{m.kind}_{lang}.csv")
            self.lahis[lang], self.exact[lang] = lh, ex
            fidelity[str(lang)] = {"spearman_lahis_exact": lahis.spearman(lh.scores, ex.scores),
                                   "spearman_taylor_exact": lahis.spearman(tay.scores, ex.scores)}
            passes[str(lang)] = {"lahis_forward": p_est.forward, "lahis_backward": p_est.backward,
                                 "exact_forward": p_ex.forward, "exact_backward": p_ex.backward,
                                 "sequences": len(corpus)}
            (self.out / "heatmaps").mkdir(parents=True, exist_ok=True)
            (self.out / "heatmaps" / f"lahis_{lang}.svg").write_text(
                heatmap.to_svg(lh.scores, f"importance, language {lang}"))
        self._report("fidelity.json", fidelity)
        self._report("passes.json", passes)

    def select(self) -> None:
        cfg = self.cfg
        mats = [self.lahis[i] for i in self.registry.ids]
        self.general, sweep = hs.sweep_general(mats, cfg.general_sweep)
        self.general.seed = cfg.seed
        self.general.save(self.out / "heads" / "general.json")
        self.specific = {}
        for lang in self.registry.ids:
            sp = hs.specific_heads(self.lahis[lang], cfg.specific_fraction, self.general)
            sp.seed = cfg.seed
            sp.save(self.out / "heads" / f"specific_{lang}.json")
            self.specific[lang] = sp
        self.summary["general_sweep"] = sweep

    def _random_sets(self, n: int, tag: int) -> list[hs.HeadSet]:
        c = self.cfg.model
        universe = hs.all_heads(c.n_layers, c.n_heads)
        return [hs.random_heads(n, universe, None, self.cfg.seed * 1000 + tag * 100 + k)
                for k in range(self.cfg.random_sets)]

    def evaluate_ppl(self) -> None:
        model, corpora = self.model, self.eval_corpora
        vanilla = intervene.ppl_report(model, None, corpora, "vanilla")
        specific = {}
        for lang, heads in self.specific.items():
            inc = intervene.perplexity(model, intervene.deactivate(model.cfg, heads), corpora[lang]) \
                - vanilla.perplexity[lang]
            rand = [intervene.perplexity(model, intervene.deactivate(model.cfg, r), corpora[lang])
                    - vanilla.perplexity[lang] for r in self._random_sets(max(1, len(heads)), lang)]
            specific[str(lang)] = {"heads": [list(h) for h in heads], "increase": inc,
                                   "random_mean_increase": float(np.mean(rand)), "random_increases": rand}
        spec = intervene.specificity_matrix(model, self.specific, corpora)
        general = {"heads": [list(h) for h in self.general], "fraction": self.general.fraction}
        if len(self.general):
            g_gates = intervene.deactivate(model.cfg, self.general)
            rsets = self._random_sets(len(self.general), 99)
            general["increase"] = {str(l): intervene.perplexity(model, g_gates, c) - vanilla.perplexity[l]
                                   for l, c in sorted(corpora.items())}
            general["random_mean_increase"] = {
                str(l): float(np.mean([intervene.perplexity(model, intervene.deactivate(model.cfg, r), c)
                                       - vanilla.perplexity[l] for r in rsets]))
                for l, c in sorted(corpora.items())}
        self._report("ppl.json", {"vanilla": vanilla.to_dict(), "specific": specific})
        self._report("specificity.json",
                    dict(spec.to_dict(), diagonal_is_row_max=spec.diagonal_is_row_max()))
        (self.out / "reports" / "specificity.csv").write_text(spec.to_csv())
        (self.out / "heatmaps" / "specificity.svg").write_text(heatmap.to_svg(spec.values, "specificity"))
        self._report("general.json", general)

    def evaluate_conflict(self) -> None:
        cfg = self.cfg
        results = []
        ids = self.registry.ids
        pairs = [(a, b) for a in ids for b in ids if a != b]
        for a, b in pairs:
            probes = synth.make_probe_set(self.registry, a, b, cfg.probes_per_pair, cfg.seed + 3000)
            if not len(self.specific[a]) or not len(self.specific[b]):
                continue
            res = intervene.steering_sweep(self.model, probes, self.specific[a], self.specific[b],
                                           self.registry.answer_range, cfg.gate_sweep)
            results.append(res.to_dict())
        shifts = [r["context1_shift"] for r in results]
        lens = self._logit_lens_check()
        self._report("conflict.json",
                    {"pairs": results, "mean_context1_shift": float(np.mean(shifts)) if shifts else 0.0,
                     "gate_sweep": list(cfg.gate_sweep), "logit_lens": lens})

    def _logit_lens_check(self, n: int = 50) -> dict:
        """Final-layer mass on language A's range, vanilla vs enhanced A heads."""
        ids = self.registry.ids
        out = {}
        best = max(self.cfg.gate_sweep)
        for a, b in zip(ids, ids[1:] + ids[:1]):
            probes = synth.make_probe_set(self.registry, a, b, n, self.cfg.seed + 4000)
            col = self.registry.ids.index(a)
            gates = intervene.build_gates(self.model.cfg, intervene.GateAssignment([(self.specific[a], best)]))
            van = np.mean([logit_lens(self.model, p.tokens(), self.registry)[:, col] for p in probes], axis=0)
            enh = np.mean([logit_lens(self.model, p.tokens(), self.registry, gates)[:, col] for p in probes],
                          axis=0)
            out[f"{a}-{b}"] = {"vanilla": van.tolist(), "enhanced": enh.tolist()}
        return out

    def evaluate_offtarget(self) -> None:
        cfg = self.cfg
        prompts = {lang: synth.make_summary_prompts(self.registry, lang, cfg.offtarget_prompts, cfg.seed + 5000)
                   for lang in self.registry.ids}
        dom = self.registry.dominant
        reports = intervene.offtarget_eval(self.model, dom, cfg.suppress_fractions, prompts, self.registry,
                                           self.lahis[dom], self.general, cfg.offtarget_tokens)
        self._report("offtarget.json",
                    {"dominant": dom, "reports": [r.to_dict() for r in reports]})

    def adapt(self) -> None:
        cfg = self.cfg
        results = {}
        for lang in self.registry.ids:
            task = adapt.make_adapt_task(self.registry, lang, cfg.adapt_train, cfg.adapt_test, cfg.seed + 6000)
            top = hs.top_fraction(self.lahis[lang], cfg.adapt_fraction)
            mask = adapt.train_mask(self.model, adapt.init_mask(cfg.model, top), task, cfg.adapt_epochs,
                                    cfg.adapt_lr, cfg.seed)
            mask.save(self.out / "masks" / f"lang_{lang}.json")
            rand_acc = []
            for k in range(cfg.adapt_random_masks):
                rm = adapt.random_mask(cfg.model, len(top), cfg.seed * 1000 + 700 + 10 * lang + k)
                rm = adapt.train_mask(self.model, rm, task, cfg.adapt_epochs, cfg.adapt_lr, cfg.seed)
                rand_acc.append(adapt.eval_accuracy(self.model, rm, task.test))
            results[str(lang)] = {
                "vanilla": adapt.eval_accuracy(self.model, None, task.test),
                "language_mask": adapt.eval_accuracy(self.model, mask, task.test),
                "random_masks": rand_acc,
                "random_mean": float(np.mean(rand_acc)),
                "n_trainable": mask.n_trainable,
                "heads": [list(h) for h in top],
            }
        self._report("adapt.json", results)

    def run(self) -> dict:
        ad.configure_threads()
        for sub in ("corpora", "model", "scores", "heads", "reports", "heatmaps", "masks"):
            (self.out / sub).mkdir(parents=True, exist_ok=True)
        _write_json(self.out / "config.json", dict(self.cfg.to_dict(), fingerprint=self.cfg.fingerprint()))
        for stage in (self.make_data, self.train, self.score, self.select, self.evaluate_ppl,
                      self.evaluate_conflict, self.evaluate_offtarget, self.adapt):
            log.info("stage %s", stage.__name__)
            stage()
        self.summary["registry_fingerprint"] = self.registry.fingerprint()
        _write_json(self.out / "summary.json", self.summary)
        return self.summary


def run_pipeline(cfg: RunConfig) -> dict:
    return Pipeline(cfg).run()
