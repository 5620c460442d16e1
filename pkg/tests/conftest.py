import pytest
import torch

from headlens import synth
from headlens.autodiff import configure_threads
from headlens.model import ModelConfig, TransformerModel

configure_threads(1)

SMALL = ModelConfig(n_layers=2, n_heads=4, n_kv_groups=2, d_model=32, d_head=8, vocab_size=128,
                    max_seq_len=40, mlp_hidden=64, seed=3)


@pytest.fixture(scope="session")
def small_registry():
    return synth.make_registry(3, vocab_size=128, seed=11)


@pytest.fixture(scope="session")
def small_corpus(small_registry):
    return synth.sample_corpus(small_registry, 1, 6, 32, seed=5)


@pytest.fixture
def small_model():
    return TransformerModel(SMALL)


@pytest.fixture
def small_model64():
    return TransformerModel(SMALL).to(torch.float64)
