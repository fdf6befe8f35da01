import numpy as np
import pytest

from seqlab.data import SyntheticTask, generate_task, make_batch
from seqlab.model import ModelConfig, TransformerModel
from seqlab.rng import stream_from


def small_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size_src=16,
        vocab_size_tgt=16,
        d_model=32,
        n_heads=4,
        n_encoder_layers=2,
        n_decoder_layers=2,
        d_ff=64,
        dropout_rate=0.1,
        max_len=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


def fresh_model(seed: int = 0, **overrides) -> TransformerModel:
    cfg = small_config(**overrides)
    return TransformerModel(cfg, init_rng=stream_from(seed, "init"))


@pytest.fixture
def tiny_batch():
    task = SyntheticTask(variant="reverse", vocab_size=16, len_min=3, len_max=7,
                         n_train=8, n_valid=4, n_test=4)
    return make_batch(generate_task(task)["train"])


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
