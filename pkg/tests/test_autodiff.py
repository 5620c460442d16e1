import math

import pytest
import torch

from headlens import autodiff as ad
from headlens.errors import ContractError, NumericError
from headlens.model import TransformerModel, forward_loss

from conftest import SMALL


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i][j] += float(a[i, t]) * float(b[t, j])
    return torch.tensor(out, dtype=torch.float64)


def test_scalar_evaluate_and_grad():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    y = ad.evaluate(lambda v: v * v, x)
    assert y.item() == 9.0
    assert float(ad.gradients(y, [x])[x]) == 6.0


def test_softmax_equal_logits_uniform():
    p = ad.causal_softmax(torch.zeros(1, 4, 4, dtype=torch.float64))
    last = p[0, -1]
    assert torch.allclose(last, torch.full((4,), 0.25, dtype=torch.float64))
    assert torch.allclose(p.sum(-1), torch.ones(1, 4, dtype=torch.float64))
    # strictly upper triangle is masked out
    assert float(torch.triu(p[0], 1).abs().sum()) == 0.0


def test_matmul_against_triple_loop():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(4, 4, generator=g, dtype=torch.float64)
    b = torch.randn(4, 4, generator=g, dtype=torch.float64)
    out = ad.evaluate(torch.matmul, a, b)
    assert torch.allclose(out, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_shape_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        ad.evaluate(torch.matmul, torch.ones(2, 3), torch.ones(2, 3))


def test_nonscalar_loss_rejected():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ContractError):
        ad.gradients(x * 2, [x])


def test_cross_entropy_grad_sums_to_zero():
    logits = torch.randn(2, 5, 7, dtype=torch.float64, requires_grad=True)
    targets = torch.randint(0, 7, (2, 5))
    loss = ad.token_nll(logits, targets).mean()
    g = ad.gradients(loss, [logits])[logits]
    assert torch.allclose(g.sum(-1), torch.zeros(2, 5, dtype=torch.float64), atol=1e-12)


def test_strict_numerics_raises():
    with ad.strict_numerics():
        with pytest.raises(NumericError):
            ad.check_finite(torch.tensor([1.0, float("nan")]), "x")
    ad.check_finite(torch.tensor([1.0, float("nan")]), "x")  # off by default


def test_pass_counter_nesting():
    x = torch.ones(2, requires_grad=True)
    with ad.track_passes() as outer:
        ad.record_forward(3)
        with ad.track_passes() as inner:
            ad.gradients((x * x).sum(), [x])
    assert (outer.forward, outer.backward) == (3, 1)
    assert (inner.forward, inner.backward) == (0, 1)


def _weight_fd_check(model, batch, n_entries, tol, seed=0):
    params = dict(model.named_parameters())
    loss = forward_loss(model, None, batch)[1]
    grads = ad.gradients(loss, list(params.values()))
    gen = torch.Generator().manual_seed(seed)
    names = sorted(params)
    worst = 0.0
    for i in range(n_entries):
        name = names[i % len(names)]
        p = params[name]
        (idx,) = ad.sample_indices(p.shape, 1, gen)
        fd = ad.central_difference(lambda: forward_loss(model, None, batch)[1], p, idx)
        an = float(grads[p][idx])
        if abs(an) < 1e-9 and abs(fd) < 1e-9:
            continue
        worst = max(worst, ad.relative_error(an, fd))
    return worst


def test_weight_gradients_match_finite_differences(small_model64, small_corpus):
    batch = small_corpus.sequences[:2, :16]
    worst = _weight_fd_check(small_model64, batch, 60, 1e-4)
    assert worst < 1e-4, worst


def test_gate_gradients_match_finite_differences(small_model64, small_corpus):
    batch = small_corpus.sequences[:2]
    gates = torch.full((SMALL.n_layers, SMALL.n_heads), 0.7, dtype=torch.float64, requires_grad=True)
    loss = forward_loss(small_model64, gates, batch)[1]
    grad = ad.gradients(loss, [gates])[gates]
    for l in range(SMALL.n_layers):
        for h in range(SMALL.n_heads):
            fd = ad.central_difference(lambda: forward_loss(small_model64, gates, batch)[1], gates, (l, h))
            assert ad.relative_error(float(grad[l, h]), fd) < 1e-4


def test_central_difference_restores_value():
    t = torch.tensor([1.0, 2.0], dtype=torch.float64)
    fd = ad.central_difference(lambda: (t ** 3).sum(), t, (1,))
    assert math.isclose(fd, 12.0, rel_tol=1e-6)
    assert t.tolist() == [1.0, 2.0]
