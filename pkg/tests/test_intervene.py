import math

import numpy as np
import pytest
import torch

from headlens import intervene, synth
from headlens.errors import ConflictError, ContractError
from headlens.headsets import HeadSet
from headlens.lahis import ImportanceMatrix
from headlens.model import ModelConfig, TransformerModel, ones_gates

from conftest import SMALL


def test_build_gates():
    assert torch.equal(intervene.build_gates(SMALL, intervene.GateAssignment()),
                       torch.ones(SMALL.n_layers, SMALL.n_heads, dtype=torch.float64))
    g = intervene.build_gates(SMALL, intervene.GateAssignment.single(HeadSet("a", [(0, 3)]), 0))
    assert int((g == 0).sum()) == 1 and g[0, 3] == 0
    with pytest.raises(ConflictError, match=r"\(1, 2\)"):
        intervene.build_gates(SMALL, intervene.GateAssignment([(HeadSet("a", [(1, 2)]), 0.0),
                                                               (HeadSet("b", [(1, 2), (0, 0)]), 2.0)]))
    with pytest.raises(ContractError):
        intervene.build_gates(SMALL, intervene.GateAssignment([(HeadSet("a", [(0, 0)]), -1.0)]))
    with pytest.raises(ContractError):
        intervene.build_gates(SMALL, intervene.GateAssignment([(HeadSet("a", [(9, 0)]), 1.0)]))


def test_uniform_model_perplexity():
    cfg = ModelConfig(n_layers=1, n_heads=2, n_kv_groups=2, d_model=16, d_head=8, vocab_size=512, max_seq_len=16)
    m = TransformerModel(cfg)
    with torch.no_grad():
        m.unembed.weight.zero_()
    seqs = np.random.default_rng(0).integers(0, 512, (4, 16))
    assert abs(intervene.perplexity(m, None, seqs) - 512) <= 1e-6 * 512


def test_ones_gates_ppl_identity(small_model, small_corpus):
    assert intervene.perplexity(small_model, None, small_corpus) == \
        intervene.perplexity(small_model, ones_gates(SMALL), small_corpus)


def test_specificity_matrix_shape(small_model, small_registry):
    corpora = {i: synth.sample_corpus(small_registry, i, 4, 32, 1) for i in small_registry.ids}
    heads = {0: HeadSet("0", [(0, 0)]), 1: HeadSet("1", []), 2: HeadSet("2", [(1, 3)])}
    spec = intervene.specificity_matrix(small_model, heads, corpora)
    assert spec.values.shape == (3, 3) and spec.labels == [0, 1, 2]
    assert np.all(spec.values[1] == 0)
    assert len(spec.diagonal_is_row_max()) == 3
    lines = spec.to_csv().splitlines()
    assert lines[1] == "#kind=specificity" and len(lines) == 4 + 3


def test_conflict_eval_shares(small_model, small_registry):
    probes = synth.make_probe_set(small_registry, 0, 1, 12, seed=0)
    a, b = HeadSet("0", [(1, 0)]), HeadSet("1", [(1, 1)])
    assigns = intervene.steering_assignments(a, b)
    assert [x.name for x in assigns] == ["vanilla", "weaken_B_x0", "enhance_A_x2", "enhance_A_x3",
                                         "enhance_A_x5"]
    reports = intervene.conflict_eval(small_model, probes, assigns, small_registry.answer_range)
    for r in reports:
        assert math.isclose(r.context1 + r.context2 + r.other, 1.0)
        assert r.n_probes == 12
    res = intervene.steering_sweep(small_model, probes, a, b, small_registry.answer_range)
    assert res.vanilla.config == "vanilla" and res.best.config != "vanilla"
    assert set(intervene.DEFAULT_GATE_SWEEP) == {0.0, 2.0, 3.0, 5.0}


def test_conflict_probe_manual_pick(small_model, small_registry):
    """Preference is read from the argmax over the answer range only."""
    probes = synth.make_probe_set(small_registry, 2, 0, 5, seed=1)
    (rep,) = intervene.conflict_eval(small_model, probes, [intervene.GateAssignment()],
                                     small_registry.answer_range)
    lo, hi = small_registry.answer_range
    hits = 0
    with torch.no_grad():
        for p in probes:
            logits = small_model(torch.tensor([p.tokens()]))[0, -1, lo:hi]
            hits += int(logits.argmax()) + lo == p.v1
    assert rep.context1 == hits / 5


def test_offtarget_report_structure(small_model, small_registry):
    prompts = {i: synth.make_summary_prompts(small_registry, i, 3, seed=0, prefix_len=10)
               for i in small_registry.ids}
    m = ImportanceMatrix(0, "lahis", np.arange(8.0).reshape(2, 4), 1)
    reps = intervene.offtarget_eval(small_model, 0, [0.25, 0.5], prompts, small_registry, m, n_tokens=4)
    assert [r.config for r in reps] == ["vanilla", "suppress_0.25", "suppress_0.5"]
    assert reps[1].suppressed == [[1, 2], [1, 3]]
    for r in reps:
        assert set(r.accuracy) == set(small_registry.ids)
        assert all(0 <= v <= 1 for v in r.accuracy.values())
        assert all(v <= 0 for v in r.quality.values())
