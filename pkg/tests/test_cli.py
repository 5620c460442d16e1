import json

import numpy as np
import pytest
import torch

from headlens import lahis, synth
from headlens.cli import run
from headlens.model import TransformerModel, load_checkpoint, save_checkpoint

from conftest import SMALL


@pytest.fixture
def workspace(tmp_path, small_registry):
    small_registry.save(tmp_path / "registry.json")
    for i in small_registry.ids:
        synth.sample_corpus(small_registry, i, 4, 32, 0).save(tmp_path / f"corpus_{i}.txt")
    save_checkpoint(TransformerModel(SMALL), tmp_path / "model.hlns")
    return tmp_path


def test_no_args_is_usage(capsys):
    assert run(["headlens"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert run(["headlens", "frobnicate"]) == 2
    assert run(["headlens", "heads", "random", "--out", "x.json", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_score_round_trip(workspace):
    out = workspace / "lahis_1.csv"
    code = run(["headlens", "score", "--method", "lahis", "--lang", "1", "--model", str(workspace / "model.hlns"),
                "--corpus", str(workspace / "corpus_1.txt"), "--out", str(out)])
    assert code == 0
    model = load_checkpoint(workspace / "model.hlns").clone(torch.float64)
    ref, _, _ = lahis.lahis_scores(model, synth.Corpus.load(workspace / "corpus_1.txt"))
    got = lahis.ImportanceMatrix.load(out)
    assert np.array_equal(got.scores, ref.scores) and got.fingerprint == ref.fingerprint


def test_wrong_language_is_runtime_error(workspace, capsys):
    code = run(["headlens", "score", "--method", "ablate", "--lang", "2", "--model", str(workspace / "model.hlns"),
                "--corpus", str(workspace / "corpus_1.txt"), "--out", str(workspace / "x.csv")])
    assert code == 1


def test_heads_gates_and_heatmap(workspace, capsys):
    m = lahis.ImportanceMatrix(0, "lahis", np.arange(8.0).reshape(2, 4), 4, "fp")
    m.save(workspace / "m.csv")
    assert run(["headlens", "heads", "select", "--matrix", str(workspace / "m.csv"), "--fraction", "0.25",
                "--out", str(workspace / "h.json")]) == 0
    assert json.loads((workspace / "h.json").read_text())["members"] == [[1, 2], [1, 3]]
    assert run(["headlens", "gates", "build", "--model", str(workspace / "model.hlns"),
                "--set", f"{workspace / 'h.json'}=0", "--out", str(workspace / "g.json")]) == 0
    gates = np.array(json.loads((workspace / "g.json").read_text())["gates"])
    assert gates.sum() == SMALL.n_layers * SMALL.n_heads - 2
    assert run(["headlens", "export", "heatmap", "--matrix", str(workspace / "m.csv"),
                "--out", str(workspace / "m.svg")]) == 0
    assert "fingerprint=fp" in (workspace / "m.svg").read_text()


def test_malformed_csv_reports_line(workspace, capsys):
    (workspace / "bad.csv").write_text("#lang=0\n1.0,2.0\n3.0,x\n")
    assert run(["headlens", "export", "heatmap", "--matrix", str(workspace / "bad.csv"),
                "--out", str(workspace / "b.svg")]) == 1
    assert "line 3" in capsys.readouterr().err


def test_eval_ppl(workspace):
    out = workspace / "ppl.json"
    assert run(["headlens", "eval", "ppl", "--model", str(workspace / "model.hlns"),
                "--corpus", str(workspace / "corpus_0.txt"), str(workspace / "corpus_2.txt"),
                "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert set(rep["perplexity"]) == {"0", "2"} and rep["model_fingerprint"]


def test_corpus_gen_makes_directory(tmp_path):
    out = tmp_path / "nested" / "data"
    assert run(["headlens", "corpus", "gen", "--out", str(out), "--vocab-size", "128",
                    "--n-languages", "3", "--n-sequences", "4", "--code-mix"]) == 0
    reg = synth.Registry.load(out / "registry.json")
    assert [synth.Corpus.load(out / f"corpus_{i}.txt").language_id for i in reg.ids] == reg.ids
    again = tmp_path / "eval"
    assert run(["headlens", "corpus", "gen", "--out", str(again), "--registry", str(out / "registry.json"),
                "--seed", "9", "--n-sequences", "4"]) == 0
    assert (again / "registry.json").read_text() == (out / "registry.json").read_text()
