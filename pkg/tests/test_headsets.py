import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from headlens import headsets as hs
from headlens.errors import ContractError
from headlens.lahis import ImportanceMatrix


def mat(scores, lang=0):
    return ImportanceMatrix(lang, "lahis", np.asarray(scores, dtype=float), 1)


def test_paper_scale_count():
    m = mat(np.random.default_rng(0).random((32, 32)))
    assert len(hs.top_fraction(m, 0.02)) == 20
    assert hs.n_selected(32, 0.02) == 1


def test_fraction_one_and_argmax():
    s = np.zeros((4, 8))
    s[2, 5] = 1.0
    assert len(hs.top_fraction(mat(s), 1.0)) == 32
    assert hs.top_fraction(mat(s), 0.02).members == [(2, 5)]
    with pytest.raises(ContractError):
        hs.top_fraction(mat(s), 0.0)


def test_tie_break_by_layer_then_head():
    s = np.zeros((2, 3))
    s[1, 0] = s[0, 2] = 1.0
    assert hs.ranked_heads(s)[:2] == [(0, 2), (1, 0)]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_top_fraction_is_top_k(seed, f):
    s = np.random.default_rng(seed).random((4, 8))
    top = hs.top_fraction(mat(s), f)
    k = hs.n_selected(32, f)
    assert len(top) == k
    cutoff = min(s[m] for m in top)
    assert sum(1 for v in s.ravel() if v > cutoff) < k


def test_general_and_specific():
    a, b = np.zeros((2, 4)), np.zeros((2, 4))
    a[0, 0] = b[0, 0] = 5
    a[1, 1], b[1, 2] = 4, 4
    g = hs.general_heads([mat(a, 0), mat(b, 1)], 0.25)
    assert g.members == [(0, 0)]
    sa = hs.specific_heads(mat(a, 0), 0.25, g)
    assert sa.members == [(1, 1)]
    assert hs.specific_heads(mat(a, 0), 0.25, hs.HeadSet("general", [])) == hs.top_fraction(mat(a, 0), 0.25)


def test_disjoint_tops_give_empty_general():
    a, b = np.zeros((1, 4)), np.zeros((1, 4))
    a[0, 0], b[0, 1] = 1, 1
    assert len(hs.general_heads([mat(a, 0), mat(b, 1)], 0.25)) == 0
    chosen, tried = hs.sweep_general([mat(a, 0), mat(b, 1)], [0.25])
    assert tried == {"0.25": 0} and len(chosen) == 0


def test_sweep_picks_smallest_nonempty():
    a = np.array([[4.0, 3, 2, 1]])
    b = np.array([[1.0, 4, 3, 2]])
    chosen, tried = hs.sweep_general([mat(a, 0), mat(b, 1)], [0.5, 0.25, 0.75])
    assert chosen.fraction == 0.5 and chosen.members == [(0, 1)]
    assert tried["0.25"] == 0


def test_specific_empty_warns(caplog):
    a = np.array([[2.0, 1.0]])
    with caplog.at_level(logging.WARNING):
        out = hs.specific_heads(mat(a), 0.5, hs.HeadSet("general", [(0, 0), (0, 1)]))
    assert len(out) == 0 and "empty" in caplog.text


def test_random_heads():
    universe = hs.all_heads(4, 8)
    assert hs.random_heads(32, universe, None, 0).members == sorted(universe)
    assert hs.random_heads(5, universe, None, 3) == hs.random_heads(5, universe, None, 3)
    ex = hs.HeadSet("x", universe[:30])
    assert set(hs.random_heads(2, universe, ex, 1).members) == set(universe[30:])
    with pytest.raises(ContractError):
        hs.random_heads(3, universe, ex, 1)
    assert len(hs.random_heads(20, hs.all_heads(32, 32), None, 0)) == 20


def test_headset_json(tmp_path):
    h = hs.HeadSet("2", [(1, 3), (0, 2), (1, 3)], 0.02, 7, {"k": [1]})
    assert h.members == [(0, 2), (1, 3)]
    h.save(tmp_path / "h.json")
    back = hs.HeadSet.load(tmp_path / "h.json")
    assert back == h and back.seed == 7 and back.fraction == 0.02 and back.provenance == {"k": [1]}
