import numpy as np
import pytest

from dgprtn.config import ModelConfig, TrainConfig
from dgprtn.numcore import Rng
from dgprtn.synthdata import GenConfig, generate
from dgprtn.training import init_model

TINY = ModelConfig(enc_hidden=6, d_node=4, edge_hidden=5, pair_hidden=5, d_embed=3,
                   rtn_hidden=6, d_in=3, n_classes=4)


@pytest.fixture(scope="session")
def tiny_gen():
    return GenConfig(n_topics=3, n_classes=4, d=3, t_min=3, t_max=5, n_utterances=4,
                     window=3, phase=2, seed=5)


@pytest.fixture(scope="session")
def tiny_data(tiny_gen):
    return generate(tiny_gen, 6)


@pytest.fixture
def tiny_model64():
    return init_model(TINY, Rng(11), dtype=np.float64)


@pytest.fixture(scope="session")
def small_data():
    return generate(GenConfig(seed=3), 30)


@pytest.fixture(scope="session")
def tiny_train_cfg():
    return TrainConfig(o=3, epochs=2, batch_size=2, heldout=2, lr=0.2, grad_clip=1.0,
                       model=TINY)
