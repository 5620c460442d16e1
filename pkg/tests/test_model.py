import math

import numpy as np
import pytest
import torch

from headlens import synth
from headlens.errors import ContractError
from headlens.model import (ModelConfig, TrainConfig, TransformerModel, checkpoint_bytes, forward_loss, generate,
                            load_checkpoint, logit_lens, model_from_bytes, n_parameters, next_token_logits,
                            ones_gates, save_checkpoint, train_model)

from conftest import SMALL


def tokens(n=2, t=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(3, SMALL.vocab_size, (n, t), generator=g)


def test_desk_parameter_count():
    assert n_parameters(TransformerModel(ModelConfig())) == 1_115_264


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_heads=8, d_head=12)
    with pytest.raises(ValueError):
        ModelConfig(n_kv_groups=3)


def test_ones_gates_bit_identical(small_model):
    x = tokens()
    a = small_model(x)
    b = small_model(x, ones_gates(SMALL))
    assert torch.equal(a, b)


def test_zero_gate_row_removes_attention(small_model):
    x = tokens(1, 8)
    block = small_model.blocks[1]
    h = small_model.residuals(x)[1]
    cos, sin = small_model.rope(8)
    from headlens import autodiff as ad
    with torch.no_grad():
        out = block.attn(ad.rms_norm(h, block.attn_norm), cos, sin, torch.zeros(SMALL.n_heads))
    assert out.abs().max().item() == 0.0


def test_causality(small_model):
    x = tokens(1, 10)
    y = x.clone()
    y[0, 7:] = 5
    assert torch.equal(small_model(x)[0, :7], small_model(y)[0, :7])


def test_gqa_equals_full_heads_with_shared_kv():
    grouped = TransformerModel(SMALL).to(torch.float64)
    full_cfg = ModelConfig(**{**SMALL.__dict__, "n_kv_groups": SMALL.n_heads})
    full = TransformerModel(full_cfg).to(torch.float64)
    rep = SMALL.n_heads // SMALL.n_kv_groups
    with torch.no_grad():
        sd = grouped.state_dict()
        for k, v in sd.items():
            if k.endswith(("wk.weight", "wv.weight")):
                v = v.view(SMALL.n_kv_groups, SMALL.d_head, -1).repeat_interleave(rep, 0).reshape(-1, v.shape[-1])
            full.state_dict()[k].copy_(v)
    x = tokens()
    assert torch.allclose(grouped(x), full(x), atol=1e-12)


def test_uniform_logits_loss():
    m = TransformerModel(SMALL)
    with torch.no_grad():
        m.unembed.weight.zero_()
    _, loss = forward_loss(m, None, tokens())
    assert abs(loss.item() - math.log(SMALL.vocab_size)) < 1e-5


def test_contract_errors(small_model):
    with pytest.raises(ContractError):
        small_model(torch.zeros(1, SMALL.max_seq_len + 1, dtype=torch.long))
    with pytest.raises(ContractError):
        forward_loss(small_model, -ones_gates(SMALL), tokens())
    with pytest.raises(ContractError):
        forward_loss(small_model, torch.ones(3, 3), tokens())


def test_zero_steps_returns_init(small_registry):
    corpora = {i: synth.sample_corpus(small_registry, i, 4, 32, 0) for i in small_registry.ids}
    m = train_model(SMALL, corpora, TrainConfig(steps=0))
    assert checkpoint_bytes(m) == checkpoint_bytes(TransformerModel(SMALL))


def test_training_decreases_loss_and_is_deterministic(small_registry):
    corpora = {i: synth.sample_corpus(small_registry, i, 32, 32, 0) for i in small_registry.ids}
    tc = TrainConfig(steps=30, batch_size=8, lr=3e-3, warmup=5, log_every=1)
    a = train_model(SMALL, corpora, tc)
    b = train_model(SMALL, corpora, tc)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert a.loss_curve[-1][1] < a.loss_curve[0][1]


def test_checkpoint_round_trip(small_model, tmp_path):
    save_checkpoint(small_model, tmp_path / "m.hlns")
    back = load_checkpoint(tmp_path / "m.hlns")
    assert back.cfg == small_model.cfg
    assert checkpoint_bytes(back) == checkpoint_bytes(small_model)
    with pytest.raises(ContractError):
        model_from_bytes(b"XXXX" + checkpoint_bytes(small_model)[4:])


def test_generation(small_model):
    prompt = [0, 5, 6, 7]
    assert generate(small_model, None, prompt, 0) == []
    a = generate(small_model, None, prompt, 6)
    assert a == generate(small_model, None, prompt, 6)
    assert a == generate(small_model, ones_gates(SMALL), prompt, 6)
    assert len(a) == 6


def test_next_token_logits_ragged(small_model):
    out = next_token_logits(small_model, None, [[0, 4, 5], [0, 4, 5, 6, 7]])
    ref = small_model(torch.tensor([[0, 4, 5, 6, 7]]))[0, -1]
    assert torch.allclose(out[1], ref, atol=1e-6)


def test_logit_lens_partition_and_final_layer(small_model, small_registry):
    toks = synth.sample_corpus(small_registry, 0, 1, 32, 0).sequences[0][:20].tolist()
    mass = logit_lens(small_model, toks, small_registry)
    assert mass.shape == (SMALL.n_layers, len(small_registry.ids) + 1)
    assert np.all((mass >= 0) & (mass <= 1))
    assert np.allclose(mass.sum(axis=1), 1.0, atol=1e-6)
    probs = torch.softmax(small_model(torch.tensor([toks]))[0, -1].double(), -1).detach().numpy()
    lo, hi = small_registry[1].content_range
    assert abs(mass[-1, 1] - probs[lo:hi].sum()) < 1e-6
