"""Desk-scale seq2seq training lab.

Transformer encoder-decoder training with two-pass decoding, step-decay and
confidence-aware scheduled sampling, target denoising, and synthetic
translation tasks for measuring the effect.
"""

__version__ = "0.1.0"

from .config import RunConfig, TrainConfig  # noqa: F401
from .data import Batch, SyntheticTask, generate_task, make_batch  # noqa: F401
from .metrics import EvalReport, corpus_bleu, evaluate  # noqa: F401
from .model import DecoderOutput, MixedInput, ModelConfig, TransformerModel  # noqa: F401
from .optim import Adam, lr_at  # noqa: F401
from .rng import RngStreams  # noqa: F401
from .schedule import (  # noqa: F401
    ExponentialDecay,
    InverseSigmoidDecay,
    LinearDecay,
    ScheduleConfig,
    TokenSelection,
    decay_probability,
    select_tokens,
)
from .tensor import Tensor, no_grad  # noqa: F401
from .train import TrainState, pretrain_then_schedule, steps_to_threshold  # noqa: F401
