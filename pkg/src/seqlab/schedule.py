"""Scheduling core: decay curves, confidence estimation, token selection.

This module decides, per decoder-input position, whether the second pass
sees the gold token, the model's own (soft) prediction, or a random token
drawn from the same target sentence. Decisions come either from a
step-indexed decay curve (vanilla scheduled sampling) or from the model's
per-position confidence with one or two thresholds.

Indexing convention: ``conf[b, t]`` is the probability the first pass
assigned to the gold token at target position t, i.e. the model's
confidence *predicting* the token that follows input position t. With the
default gate (``gate_index="t"``) input position t is resampled according
to conf[b, t]; the ``"t-1"`` variant gates it by conf[b, t-1], the
confidence with which the token at that very slot was predicted. Input
position 0 carries BOS and is never resampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import (
    BOS,
    EOS,
    PAD,
    DecoderOutput,
    MixedInput,
    TransformerModel,
    soft_prediction_embeddings,
)
from .tensor import Tensor

GOLDEN, PREDICTED, RANDOM = 0, 1, 2

MODE_TEACHER_FORCING = "teacher_forcing"
MODE_VANILLA = "vanilla_ss"
MODE_CONFIDENCE = "confidence_aware"
MODE_CONFIDENCE_DENOISING = "confidence_aware_denoising"
MODES = (MODE_TEACHER_FORCING, MODE_VANILLA, MODE_CONFIDENCE, MODE_CONFIDENCE_DENOISING)

STRATEGY_DEFAULT_K = {"linear": -5e-5, "exponential": 0.99999, "inverse_sigmoid": 20000.0}


# ---------------------------------------------------------------------------
# decay strategies on training steps


@dataclass(frozen=True)
class LinearDecay:
    """f(i) = max(epsilon, k*i + b) with negative slope k."""

    epsilon: float
    k: float
    b: float

    def __post_init__(self):
        if not self.k < 0:
            raise ConfigError(f"linear decay needs slope k < 0, got {self.k}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"linear decay epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.b <= 1.0:
            raise ConfigError(f"linear decay offset b must lie in [0, 1], got {self.b}")


@dataclass(frozen=True)
class ExponentialDecay:
    """f(i) = k ** i with radix 0 < k < 1."""

    k: float

    def __post_init__(self):
        if not 0.0 < self.k < 1.0:
            raise ConfigError(f"exponential decay needs 0 < k < 1, got {self.k}")


@dataclass(frozen=True)
class InverseSigmoidDecay:
    """f(i) = k / (k + e^(i/k)) with sharpness k >= 1."""

    k: float

    def __post_init__(self):
        if not self.k >= 1.0:
            raise ConfigError(f"inverse sigmoid decay needs k >= 1, got {self.k}")


DecayStrategy = Union[LinearDecay, ExponentialDecay, InverseSigmoidDecay]


def decay_probability(strategy: DecayStrategy, step: float) -> float:
    """Probability of keeping the gold token at training step ``step``.

    Monotone non-increasing in the step for every valid strategy. Real-valued
    steps are accepted so analytic landmarks (e.g. the inverse-sigmoid
    midpoint at k*ln k) can be evaluated exactly.
    """
    if step < 0:
        raise ConfigError(f"step must be nonnegative, got {step}")
    if isinstance(strategy, LinearDecay):
        return max(strategy.epsilon, strategy.k * step + strategy.b)
    if isinstance(strategy, ExponentialDecay):
        return strategy.k ** step
    # stable logistic form of k / (k + e^(i/k)): 1 / (1 + e^(i/k - ln k))
    z = step / strategy.k - math.log(strategy.k)
    if z >= 0:
        return math.exp(-z) / (1.0 + math.exp(-z))
    return 1.0 / (1.0 + math.exp(z))


# ---------------------------------------------------------------------------
# confidence estimators


@dataclass(frozen=True)
class PtpEstimator:
    """Gold-token probability read straight off the first pass; free."""


@dataclass(frozen=True)
class McExpectationEstimator:
    """Mean gold-token probability over n_samples dropout-perturbed passes."""

    n_samples: int = 5
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"MC estimation needs >= 1 samples, got {self.n_samples}")


@dataclass(frozen=True)
class McVarianceEstimator:
    """One minus the variance of gold-token probabilities over the passes.

    Population variance by default; ``sample_variance`` switches to the
    (n-1)-denominator convention.
    """

    n_samples: int = 5
    dropout_rate: float = 0.1
    sample_variance: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"MC estimation needs >= 1 samples, got {self.n_samples}")


ConfidenceEstimator = Union[PtpEstimator, McExpectationEstimator, McVarianceEstimator]


def confidence_ptp(pass1: DecoderOutput) -> np.ndarray:
    """Per-position confidence from the already-computed first pass."""
    return pass1.per_position_gold_prob


def mc_confidence_samples(model: TransformerModel, src, src_pad, tgt_input, tgt_output,
                          n_samples: int, dropout_rate: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Gold-token probabilities from n full forwards with fresh dropout masks."""
    samples = []
    for _ in range(n_samples):
        with T.no_grad():
            memory = model.encode(src, src_pad, train_mode=True, rng=rng,
                                  dropout_rate=dropout_rate)
            out = model.decode_pass1(memory, src_pad, tgt_input, tgt_output,
                                     train_mode=True, rng=rng, dropout_rate=dropout_rate)
        samples.append(out.per_position_gold_prob)
    return np.stack(samples, axis=0)


def combine_mc_samples(samples: np.ndarray, kind: str, sample_variance: bool = False) -> np.ndarray:
    """Collapse [n_samples, ...] gold probabilities into one confidence map."""
    if kind == "expectation":
        # shifted mean: exact when all samples coincide (zero dropout)
        return samples[0] + (samples - samples[0]).mean(axis=0)
    if kind == "variance":
        if sample_variance and samples.shape[0] < 2:
            raise ConfigError("sample variance needs >= 2 MC samples")
        return 1.0 - samples.var(axis=0, ddof=1 if sample_variance else 0)
    raise ConfigError(f"unknown MC combination {kind!r}")


def confidence_mc(estimator: ConfidenceEstimator, model: TransformerModel,
                  src, src_pad, tgt_input, tgt_output,
                  rng: np.random.Generator) -> np.ndarray:
    if isinstance(estimator, McExpectationEstimator):
        kind, sample_var = "expectation", False
    elif isinstance(estimator, McVarianceEstimator):
        kind, sample_var = "variance", estimator.sample_variance
    else:
        raise ConfigError(f"not a Monte Carlo estimator: {estimator}")
    samples = mc_confidence_samples(model, src, src_pad, tgt_input, tgt_output,
                                    estimator.n_samples, estimator.dropout_rate, rng)
    return combine_mc_samples(samples, kind, sample_var)


# ---------------------------------------------------------------------------
# token selection


@dataclass
class TokenSelection:
    """Per-position class assignment over decoder-input positions.

    PAD positions and position 0 (BOS) are always GOLDEN; ``replacement``
    holds the sampled token index wherever the class is RANDOM.
    """

    classes: np.ndarray      # [batch, tgt_len] int8
    replacement: np.ndarray  # [batch, tgt_len] int64, -1 where unused
    non_pad: np.ndarray      # [batch, tgt_len] bool

    def fractions(self) -> dict[str, float]:
        total = max(int(self.non_pad.sum()), 1)
        cls = self.classes[self.non_pad]
        return {
            "golden": float((cls == GOLDEN).sum() / total),
            "predicted": float((cls == PREDICTED).sum() / total),
            "random": float((cls == RANDOM).sum() / total),
        }

    @classmethod
    def all_golden(cls, non_pad: np.ndarray) -> "TokenSelection":
        shape = non_pad.shape
        return cls(np.zeros(shape, dtype=np.int8), np.full(shape, -1, dtype=np.int64),
                   non_pad.astype(bool))


def vanilla_sample_mask(f_i: float, non_pad: np.ndarray,
                        rng: np.random.Generator) -> TokenSelection:
    """Independent Bernoulli per resampleable position: gold w.p. f_i."""
    if not 0.0 <= f_i <= 1.0:
        raise ConfigError(f"sampling probability must lie in [0, 1], got {f_i}")
    non_pad = non_pad.astype(bool)
    keep_gold = rng.random(non_pad.shape) < f_i
    classes = np.where(keep_gold, GOLDEN, PREDICTED).astype(np.int8)
    classes[:, 0] = GOLDEN
    classes[~non_pad] = GOLDEN
    return TokenSelection(classes, np.full(non_pad.shape, -1, dtype=np.int64), non_pad)


def select_tokens(conf: np.ndarray, config: "ScheduleConfig", tgt_output: np.ndarray,
                  non_pad: np.ndarray, rng: np.random.Generator) -> TokenSelection:
    """Classify each input position from its gate confidence.

    gate <= t_golden keeps gold; above it the position takes the model
    prediction; in denoising mode a gate above t_rand instead takes a random
    token drawn uniformly from the sentence's own content tokens (falling
    back to gold when a sentence has none).
    """
    if config.mode not in (MODE_CONFIDENCE, MODE_CONFIDENCE_DENOISING):
        raise ConfigError(f"select_tokens is undefined for mode {config.mode!r}")
    conf = np.asarray(conf)
    non_pad = non_pad.astype(bool)
    if conf.shape != non_pad.shape:
        raise ConfigError(f"confidence shape {conf.shape} does not match batch {non_pad.shape}")

    gate = conf if config.gate_index == "t" else np.concatenate(
        [np.zeros((conf.shape[0], 1)), conf[:, :-1]], axis=1
    )
    classes = np.full(conf.shape, GOLDEN, dtype=np.int8)
    predicted = gate > config.t_golden
    if config.mode == MODE_CONFIDENCE_DENOISING:
        random_cls = gate > config.t_rand
        classes[predicted & ~random_cls] = PREDICTED
        classes[random_cls] = RANDOM
    else:
        classes[predicted] = PREDICTED
    classes[:, 0] = GOLDEN
    classes[~non_pad] = GOLDEN

    replacement = np.full(conf.shape, -1, dtype=np.int64)
    if (classes == RANDOM).any():
        tgt_output = np.asarray(tgt_output)
        for b in range(conf.shape[0]):
            slots = np.nonzero(classes[b] == RANDOM)[0]
            if slots.size == 0:
                continue
            pool = tgt_output[b][non_pad[b]]
            pool = pool[(pool != BOS) & (pool != EOS) & (pool != PAD)]
            if pool.size == 0:
                classes[b, slots] = GOLDEN
                continue
            replacement[b, slots] = pool[rng.integers(0, pool.size, size=slots.size)]
    return TokenSelection(classes, replacement, non_pad)


def build_mixed_input(selection: TokenSelection, gold_inputs: np.ndarray,
                      pass1_probs: Optional[Tensor], tgt_embed: Tensor,
                      hard_predictions: bool = False) -> MixedInput:
    """Assemble second-pass input embeddings from the selection.

    GOLDEN positions take the gold token's embedding row (the exact same
    gather as teacher forcing, so an all-gold selection is bit-identical to
    it). PREDICTED positions take the probability-weighted sum of embeddings
    under the previous output position's distribution, or the argmax token's
    row with ``hard_predictions``. RANDOM positions take the sampled
    replacement token's row. Keeping ``pass1_probs`` on the graph is the
    caller's choice: pass a detached tensor to stop gradients at pass 1.
    """
    classes = selection.classes
    gold_emb = T.embedding_lookup(tgt_embed, gold_inputs)
    if not (classes != GOLDEN).any():
        return MixedInput(gold_emb, provenance=selection)

    g_mask = Tensor((classes == GOLDEN).astype(np.float64)[..., None])
    out = T.mul(gold_emb, g_mask)

    if (classes == PREDICTED).any():
        if pass1_probs is None:
            raise ConfigError("PREDICTED positions need first-pass probabilities")
        if hard_predictions:
            pred_tokens = np.zeros_like(gold_inputs)
            pred_tokens[:, 1:] = pass1_probs.data[:, :-1].argmax(axis=-1)
            pred_emb = T.embedding_lookup(tgt_embed, pred_tokens)
        else:
            shifted = T.shift_right(pass1_probs, axis=1)
            pred_emb = soft_prediction_embeddings(shifted, tgt_embed)
        p_mask = Tensor((classes == PREDICTED).astype(np.float64)[..., None])
        out = T.add(out, T.mul(pred_emb, p_mask))

    if (classes == RANDOM).any():
        safe = np.where(classes == RANDOM, selection.replacement, 0)
        rand_emb = T.embedding_lookup(tgt_embed, safe)
        r_mask = Tensor((classes == RANDOM).astype(np.float64)[..., None])
        out = T.add(out, T.mul(rand_emb, r_mask))

    return MixedInput(out, provenance=selection)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ScheduleConfig:
    """Serializable schedule settings; field names match the run-config file."""

    mode: str = MODE_CONFIDENCE_DENOISING
    strategy: Optional[str] = None     # linear | exponential | inverse_sigmoid
    epsilon: float = 0.2
    k: Optional[float] = None          # None -> per-strategy tuned default
    b: float = 1.0
    estimator: str = "ptp"             # ptp | mc_expectation | mc_variance
    K: int = 5
    t_golden: float = 0.9
    t_rand: float = 0.95
    mc_dropout_rate: float = 0.1
    mc_sample_variance: bool = False
    gate_index: str = "t"              # "t" (as printed) or "t-1"
    hard_predictions: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown schedule mode {self.mode!r}; expected one of {MODES}")
        if self.mode == MODE_VANILLA and self.strategy is None:
            raise ConfigError("vanilla_ss mode requires a decay strategy")
        if self.strategy is not None and self.strategy not in STRATEGY_DEFAULT_K:
            raise ConfigError(f"unknown decay strategy {self.strategy!r}")
        for name in ("t_golden", "t_rand"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        # two-interval selection never consults t_rand, so the ordering
        # constraint only binds when the denoising interval exists
        if self.mode == MODE_CONFIDENCE_DENOISING and self.t_golden > self.t_rand:
            raise ConfigError(f"t_golden {self.t_golden} exceeds t_rand {self.t_rand}")
        if self.estimator not in ("ptp", "mc_expectation", "mc_variance"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.gate_index not in ("t", "t-1"):
            raise ConfigError(f"gate_index must be 't' or 't-1', got {self.gate_index!r}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.strategy is not None:
            self.build_strategy()  # hyperparameter validation happens here

    def build_strategy(self) -> DecayStrategy:
        k = self.k if self.k is not None else STRATEGY_DEFAULT_K[self.strategy]
        if self.strategy == "linear":
            return LinearDecay(self.epsilon, k, self.b)
        if self.strategy == "exponential":
            return ExponentialDecay(k)
        return InverseSigmoidDecay(k)

    def build_estimator(self) -> ConfidenceEstimator:
        if self.estimator == "ptp":
            return PtpEstimator()
        if self.estimator == "mc_expectation":
            return McExpectationEstimator(self.K, self.mc_dropout_rate)
        return McVarianceEstimator(self.K, self.mc_dropout_rate, self.mc_sample_variance)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        return cls(**d)
