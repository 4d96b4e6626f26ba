import numpy as np
import pytest

from ringpipe.model import build_stack


def tiny_stack(vocab=7, dim=8, ffn=8, blocks=2, seq=4, dropout=0.1, seed=11):
    return build_stack(vocab, dim, ffn, blocks, seq, dropout, seed)


def random_tokens(rng, batch, seq, vocab):
    return (rng.uniform((batch, seq)) * vocab).astype(np.int64)


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)
