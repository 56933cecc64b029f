"""
Shared pytest fixtures: a tiny reversal corpus and tiny models
"""

import os

import numpy as np
import pytest

from service.model import HeadMaskTransformer, ModelConfig
from service.tasks import gen_reversal_task


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, enabled with HEADMASK_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("HEADMASK_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set HEADMASK_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def tiny_corpus():
    return gen_reversal_task(vocab_size=12, len_range=(2, 4), n_pairs=200, seed=0, max_len=16)


def make_config(corpus, layers=1, heads=2, d_model=8, d_ff=16, dropout=0.1, **kwargs) -> ModelConfig:
    return ModelConfig(layers=layers, heads_per_layer=heads, d_model=d_model, d_ff=d_ff,
                       vocab_src=len(corpus.src_vocab), vocab_tgt=len(corpus.tgt_vocab),
                       dropout=dropout, max_len=16, **kwargs)


@pytest.fixture
def tiny_model(tiny_corpus):
    return HeadMaskTransformer(make_config(tiny_corpus, layers=2, heads=2), seed=3)


@pytest.fixture
def tiny_model64(tiny_corpus):
    """Float64 copy of the tiny architecture for gradient checks"""
    return HeadMaskTransformer(make_config(tiny_corpus, layers=1, heads=2, dropout=0.0), seed=3, dtype=np.float64)
