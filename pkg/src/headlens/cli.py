"""Command-line entry point. Each subcommand runs one stage on files.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import adapt, heatmap, intervene, lahis, synth
from . import autodiff as ad
from . import headsets as hs
from .errors import HeadlensError
from .model import ModelConfig, TrainConfig, load_checkpoint, model_fingerprint, save_checkpoint, train_model
from .pipeline import RunConfig, run_pipeline


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")


def _dump(obj, path) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _heads_arg(path) -> hs.HeadSet:
    return hs.HeadSet.load(path)


# -- handlers ----------------------------------------------------------------

def cmd_corpus_gen(a) -> None:
    if a.registry:
        reg = synth.Registry.load(a.registry)
    else:
        reg = synth.make_registry(a.n_languages, a.vocab_size, a.answer_range, a.seed,
                                  concentration=a.concentration)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    reg.save(out / "registry.json")
    for lang in reg.ids:
        c = synth.sample_corpus(reg, lang, a.n_sequences, a.seq_len, a.seed, code_mix=a.code_mix)
        c.save(out / f"corpus_{lang}.txt")


def cmd_train(a) -> None:
    reg = synth.Registry.load(a.registry)
    corpora = {}
    for p in a.corpus:
        c = synth.Corpus.load(p)
        corpora[c.language_id] = c
    tc = TrainConfig(steps=a.steps, batch_size=a.batch_size, lr=a.lr, seed=a.seed)
    cfg = ModelConfig(vocab_size=reg.vocab_size, seed=a.seed)
    model = train_model(cfg, corpora, tc, {s.id: s.mix_weight for s in reg.languages if s.id in corpora})
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, a.out)


def cmd_score(a) -> None:
    model = load_checkpoint(a.model).clone(torch.float64)
    corpus = synth.Corpus.load(a.corpus)
    if a.lang is not None and a.lang != corpus.language_id:
        raise HeadlensError(f"corpus is language {corpus.language_id}, not {a.lang}")
    if a.method == "lahis":
        m, _, _ = lahis.lahis_scores(model, corpus)
    else:
        m = lahis.exact_ablation_scores(model, corpus)
    m.save(a.out)


def cmd_heads(a) -> None:
    if a.action == "select":
        out = hs.top_fraction(lahis.ImportanceMatrix.load(a.matrix[0]), a.fraction)
    elif a.action == "general":
        mats = [lahis.ImportanceMatrix.load(p) for p in a.matrix]
        if a.fraction is not None:
            out = hs.general_heads(mats, a.fraction)
        else:
            out, _ = hs.sweep_general(mats, (0.05, 0.1, 0.2))
    elif a.action == "specific":
        general = hs.HeadSet.load(a.general) if a.general else hs.HeadSet("general", [])
        out = hs.specific_heads(lahis.ImportanceMatrix.load(a.matrix[0]), a.fraction or 0.02, general)
    else:
        exclude = hs.HeadSet.load(a.exclude) if a.exclude else None
        out = hs.random_heads(a.n, hs.all_heads(a.n_layers, a.n_heads), exclude, a.seed)
    out.save(a.out)


def cmd_gates_build(a) -> None:
    cfg = load_checkpoint(a.model).cfg
    entries = []
    for spec in a.set:
        path, _, value = spec.rpartition("=")
        if not path:
            raise UsageError(f"--set expects HEADS.json=VALUE, got {spec!r}\n")
        entries.append((hs.HeadSet.load(path), float(value)))
    gates = intervene.build_gates(cfg, intervene.GateAssignment(entries, "cli"))
    _dump({"gates": gates.tolist(), "model_fingerprint": model_fingerprint(load_checkpoint(a.model))}, a.out)


def _gates_from(model, heads_path):
    return None if heads_path is None else intervene.deactivate(model.cfg, hs.HeadSet.load(heads_path))


def cmd_eval(a) -> None:
    model = load_checkpoint(a.model)
    fp = {"model_fingerprint": model_fingerprint(model)}
    if a.action == "ppl":
        corpora = {c.language_id: c for c in map(synth.Corpus.load, a.corpus)}
        rep = intervene.ppl_report(model, _gates_from(model, a.heads), corpora, a.heads or "vanilla")
        _dump(dict(rep.to_dict(), **fp), a.out)
    elif a.action == "specificity":
        corpora = {c.language_id: c for c in map(synth.Corpus.load, a.corpus)}
        heads = {int(h.label): h for h in map(hs.HeadSet.load, a.heads_list)}
        spec = intervene.specificity_matrix(model, heads, corpora)
        _dump(dict(spec.to_dict(), diagonal_is_row_max=spec.diagonal_is_row_max(), **fp), a.out)
    elif a.action == "conflict":
        reg = synth.Registry.load(a.registry)
        probes = synth.make_probe_set(reg, a.lang_a, a.lang_b, a.n, a.seed)
        res = intervene.steering_sweep(model, probes, hs.HeadSet.load(a.heads_a), hs.HeadSet.load(a.heads_b),
                                       reg.answer_range, a.gates)
        _dump(dict(res.to_dict(), registry_fingerprint=reg.fingerprint(), **fp), a.out)
    else:
        reg = synth.Registry.load(a.registry)
        prompts = {l: synth.make_summary_prompts(reg, l, a.n, a.seed) for l in reg.ids}
        general = hs.HeadSet.load(a.general) if a.general else None
        reports = intervene.offtarget_eval(model, reg.dominant, a.fractions, prompts, reg,
                                           lahis.ImportanceMatrix.load(a.matrix), general)
        _dump({"reports": [r.to_dict() for r in reports], "registry_fingerprint": reg.fingerprint(), **fp},
              a.out)


def cmd_adapt(a) -> None:
    model = load_checkpoint(a.model)
    reg = synth.Registry.load(a.registry)
    task = adapt.make_adapt_task(reg, a.lang, a.n_train, a.n_test, a.seed)
    if a.action == "train":
        mask = adapt.init_mask(model.cfg, hs.HeadSet.load(a.heads))
        mask = adapt.train_mask(model, mask, task, a.epochs, a.lr, a.seed)
        mask.provenance["model_fingerprint"] = model_fingerprint(model)
        mask.save(a.out)
    else:
        mask = adapt.LanguageHeadMask.load(a.mask) if a.mask else None
        _dump({"accuracy": adapt.eval_accuracy(model, mask, task.test), "n_test": len(task.test),
               "model_fingerprint": model_fingerprint(model)}, a.out)


def cmd_export_heatmap(a) -> None:
    m = lahis.ImportanceMatrix.load(a.matrix)
    out = Path(a.out)
    if a.format == "pgm":
        out.write_bytes(heatmap.to_pgm(m.scores))
    else:
        title = f"{m.kind} lang={m.language_id} samples={m.n_samples} fingerprint={m.fingerprint}"
        out.write_text(heatmap.to_svg(m.scores, title, a.color))


def cmd_pipeline(a) -> None:
    overrides = {"seed": a.seed, "out_dir": a.out}
    cfg = RunConfig.from_file(a.config, **overrides) if a.config else \
        RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    summary = run_pipeline(cfg)
    _dump(summary, None)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="headlens", description="language-specific attention head toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    corpus = sub.add_parser("corpus").add_subparsers(dest="action", parser_class=_Parser, required=True)
    g = corpus.add_parser("gen")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--n-languages", type=int, default=5)
    g.add_argument("--vocab-size", type=int, default=512)
    g.add_argument("--answer-range", type=int, default=16)
    g.add_argument("--concentration", type=float, default=0.05)
    g.add_argument("--n-sequences", type=int, default=3125)
    g.add_argument("--seq-len", type=int, default=64)
    g.add_argument("--registry", help="reuse this registry instead of building one from --seed")
    g.add_argument("--code-mix", action="store_true", help="mixed-language running text (training data)")
    g.set_defaults(fn=cmd_corpus_gen)

    t = sub.add_parser("train")
    t.add_argument("--registry", required=True)
    t.add_argument("--corpus", nargs="+", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=TrainConfig.steps)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=TrainConfig.lr)
    t.add_argument("--seed", type=int, default=7)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("score")
    s.add_argument("--method", choices=["lahis", "ablate"], required=True)
    s.add_argument("--lang", type=int)
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_score)

    h = sub.add_parser("heads")
    h.add_argument("action", choices=["select", "general", "specific", "random"])
    h.add_argument("--matrix", nargs="+", default=[])
    h.add_argument("--fraction", type=float)
    h.add_argument("--general")
    h.add_argument("--exclude")
    h.add_argument("--n", type=int, default=1)
    h.add_argument("--n-layers", type=int, default=4)
    h.add_argument("--n-heads", type=int, default=8)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out", required=True)
    h.set_defaults(fn=cmd_heads)

    gates = sub.add_parser("gates").add_subparsers(dest="action", parser_class=_Parser, required=True)
    gb = gates.add_parser("build")
    gb.add_argument("--model", required=True)
    gb.add_argument("--set", action="append", default=[], metavar="HEADS.json=VALUE")
    gb.add_argument("--out")
    gb.set_defaults(fn=cmd_gates_build)

    e = sub.add_parser("eval")
    e.add_argument("action", choices=["ppl", "specificity", "conflict", "offtarget"])
    e.add_argument("--model", required=True)
    e.add_argument("--registry")
    e.add_argument("--corpus", nargs="+", default=[])
    e.add_argument("--heads")
    e.add_argument("--heads-list", nargs="+", default=[])
    e.add_argument("--heads-a")
    e.add_argument("--heads-b")
    e.add_argument("--lang-a", type=int, default=0)
    e.add_argument("--lang-b", type=int, default=1)
    e.add_argument("--gates", type=float, nargs="+", default=list(intervene.DEFAULT_GATE_SWEEP))
    e.add_argument("--matrix")
    e.add_argument("--general")
    e.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.05])
    e.add_argument("--n", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    ap = sub.add_parser("adapt")
    ap.add_argument("action", choices=["train", "eval"])
    ap.add_argument("--model", required=True)
    ap.add_argument("--registry", required=True)
    ap.add_argument("--lang", type=int, required=True)
    ap.add_argument("--heads")
    ap.add_argument("--mask")
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=800)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    ap.set_defaults(fn=cmd_adapt)

    ex = sub.add_parser("export").add_subparsers(dest="action", parser_class=_Parser, required=True)
    hm = ex.add_parser("heatmap")
    hm.add_argument("--matrix", required=True)
    hm.add_argument("--out", required=True)
    hm.add_argument("--format", choices=["svg", "pgm"], default="svg")
    hm.add_argument("--color", default="#08306b")
    hm.set_defaults(fn=cmd_export_heatmap)

    pl = sub.add_parser("pipeline")
    pl.add_argument("--config")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--out")
    pl.set_defaults(fn=cmd_pipeline)
    return p


def run(argv) -> int:
    """argv[0] is the program name, as in sys.argv."""
    parser = build_parser()
    args_in = list(argv[1:])
    try:
        if not args_in:
            raise UsageError(parser.format_usage())
        args = parser.parse_args(args_in)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 2
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    ad.configure_threads()
    try:
        args.fn(args)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 2
    except (HeadlensError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        sys.stderr.write(f"headlens: error: {exc}\n")
        return 1
    return 0


def main() -> None:
    sys.exit(run(sys.argv))


if __name__ == "__main__":
    main()
