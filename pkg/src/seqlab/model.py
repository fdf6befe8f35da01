"""Transformer encoder-decoder with a second, mixed-input decoding pass.

Both decoding passes run the same decoder function over the same parameter
dict, so parameter sharing holds by construction. Pass 1 consumes gold
(teacher-forcing) inputs and reports the probability assigned to each gold
token; pass 2 consumes externally assembled input embeddings, which lets the
scheduler splice gold, predicted, and noise tokens per position.

Reserved vocabulary indices: BOS=0, EOS=1, PAD=2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

BOS, EOS, PAD = 0, 1, 2
N_RESERVED = 3

NEG_INF = -1e9  # additive attention mask; large enough that exp underflows to 0


@dataclass
class ModelConfig:
    vocab_size_src: int = 32
    vocab_size_tgt: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 256
    dropout_rate: float = 0.1
    max_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if min(self.vocab_size_src, self.vocab_size_tgt) <= N_RESERVED:
            raise ConfigError("vocab sizes must exceed the reserved token count (3)")
        for name in ("d_model", "n_heads", "n_encoder_layers", "n_decoder_layers", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class DecoderOutput:
    """One decoding pass over a batch.

    ``per_position_gold_prob[b, t]`` is the (unsmoothed) softmax probability
    the pass assigned to the gold token at target position t.
    """

    logits: Tensor                      # [batch, tgt_len, vocab]
    probs: Tensor                       # softmax of logits
    per_position_gold_prob: np.ndarray  # [batch, tgt_len]


@dataclass
class MixedInput:
    """Per-position decoder-input embeddings for the second pass.

    Embeddings live in raw embedding-table space; the decoder applies the
    sqrt(d_model) scale and positional encoding itself, so an all-gold mix
    reproduces teacher forcing bit for bit.
    """

    embeddings: Tensor  # [batch, tgt_len, d_model]
    provenance: object = field(repr=False, default=None)  # TokenSelection


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameter dict. The output projection starts near zero so an
    untrained model predicts an almost exactly uniform distribution."""
    d, f = config.d_model, config.d_ff
    p: dict[str, np.ndarray] = {}
    p["src_embed"] = rng.normal(0.0, d ** -0.5, size=(config.vocab_size_src, d))
    p["tgt_embed"] = rng.normal(0.0, d ** -0.5, size=(config.vocab_size_tgt, d))

    def attn_block(prefix: str):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{w}"] = _xavier(rng, d, d)

    def ln_block(prefix: str):
        p[f"{prefix}.g"] = np.ones(d)
        p[f"{prefix}.b"] = np.zeros(d)

    def ffn_block(prefix: str):
        p[f"{prefix}.w1"] = _xavier(rng, d, f)
        p[f"{prefix}.b1"] = np.zeros(f)
        p[f"{prefix}.w2"] = _xavier(rng, f, d)
        p[f"{prefix}.b2"] = np.zeros(d)

    for i in range(config.n_encoder_layers):
        attn_block(f"enc.{i}.attn")
        ln_block(f"enc.{i}.ln1")
        ffn_block(f"enc.{i}.ffn")
        ln_block(f"enc.{i}.ln2")
    for i in range(config.n_decoder_layers):
        attn_block(f"dec.{i}.self")
        ln_block(f"dec.{i}.ln1")
        attn_block(f"dec.{i}.cross")
        ln_block(f"dec.{i}.ln2")
        ffn_block(f"dec.{i}.ffn")
        ln_block(f"dec.{i}.ln3")
    p["out_w"] = rng.normal(0.0, 0.02, size=(d, config.vocab_size_tgt))
    p["out_b"] = np.zeros(config.vocab_size_tgt)
    return {name: Tensor(arr, requires_grad=True) for name, arr in p.items()}


def soft_prediction_embeddings(probs: Tensor, embedding_table: Tensor) -> Tensor:
    """Probability-weighted sum of embedding rows: probs @ table."""
    return T.matmul(probs, embedding_table)


@lru_cache(maxsize=None)
def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((1, 1, n, n))
    iu = np.triu_indices(n, k=1)
    m[..., iu[0], iu[1]] = NEG_INF
    m.setflags(write=False)
    return m


def padding_mask(pad: np.ndarray) -> np.ndarray:
    """[batch, keys] boolean pad flags -> additive [batch, 1, 1, keys] mask."""
    return np.where(pad[:, None, None, :], NEG_INF, 0.0)


class TransformerModel:
    """Encoder-decoder over one shared parameter store."""

    def __init__(self, config: ModelConfig, params: Optional[dict[str, Tensor]] = None,
                 init_rng: Optional[np.random.Generator] = None):
        self.config = config
        if params is None:
            params = init_params(config, init_rng if init_rng is not None else np.random.default_rng(0))
        self.params = params
        self.pe = sinusoidal_positions(config.max_len, config.d_model)

    # -- building blocks ---------------------------------------------------

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray) -> Tensor:
        p = self.params
        return T.multi_head_attention(
            q_in, kv_in,
            p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"], p[f"{prefix}.wo"],
            self.config.n_heads, mask,
        )

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        return T.feed_forward(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"],
                              p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _sublayer(self, x: Tensor, out: Tensor, ln_prefix: str,
                  train: bool, rate: float, rng) -> Tensor:
        out = T.dropout(out, rate, rng, train=train)
        return T.layer_norm(T.add(x, out), self.params[f"{ln_prefix}.g"], self.params[f"{ln_prefix}.b"])

    def _embed_in(self, raw: Tensor, train: bool, rate: float, rng) -> Tensor:
        n = raw.shape[1]
        if n > self.config.max_len:
            raise ShapeError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = T.add(T.mul(raw, Tensor(self.config.d_model ** 0.5)), Tensor(self.pe[:n]))
        return T.dropout(x, rate, rng, train=train)

    def _rate(self, override: Optional[float]) -> float:
        return self.config.dropout_rate if override is None else override

    # -- passes -------------------------------------------------------------

    def encode(self, src: np.ndarray, src_pad: np.ndarray, train_mode: bool = False,
               rng=None, dropout_rate: Optional[float] = None) -> Tensor:
        """Encode a [batch, src_len] token matrix into memory states.

        ``src_pad`` flags padded key positions; they are masked out of every
        attention, so values stored there never influence real positions.
        """
        rate = self._rate(dropout_rate)
        raw = T.embedding_lookup(self.params["src_embed"], src)
        x = self._embed_in(raw, train_mode, rate, rng)
        mask = padding_mask(src_pad)
        for i in range(self.config.n_encoder_layers):
            x = self._sublayer(x, self._attention(f"enc.{i}.attn", x, x, mask),
                               f"enc.{i}.ln1", train_mode, rate, rng)
            x = self._sublayer(x, self._ffn(f"enc.{i}.ffn", x),
                               f"enc.{i}.ln2", train_mode, rate, rng)
        return x

    def _decode_from_embeddings(self, memory: Tensor, src_pad: np.ndarray, raw_embeds: Tensor,
                                train_mode: bool, rng, dropout_rate: Optional[float]) -> Tensor:
        rate = self._rate(dropout_rate)
        x = self._embed_in(raw_embeds, train_mode, rate, rng)
        n = x.shape[1]
        self_mask = causal_mask(n)
        cross = padding_mask(src_pad)
        for i in range(self.config.n_decoder_layers):
            x = self._sublayer(x, self._attention(f"dec.{i}.self", x, x, self_mask),
                               f"dec.{i}.ln1", train_mode, rate, rng)
            x = self._sublayer(x, self._attention(f"dec.{i}.cross", x, memory, cross),
                               f"dec.{i}.ln2", train_mode, rate, rng)
            x = self._sublayer(x, self._ffn(f"dec.{i}.ffn", x),
                               f"dec.{i}.ln3", train_mode, rate, rng)
        return T.add(T.matmul(x, self.params["out_w"]), self.params["out_b"])

    def _output(self, logits: Tensor, gold_targets: np.ndarray) -> DecoderOutput:
        probs = T.softmax(logits, axis=-1)
        gold = np.take_along_axis(probs.data, np.asarray(gold_targets)[..., None], axis=-1)[..., 0]
        return DecoderOutput(logits=logits, probs=probs, per_position_gold_prob=gold)

    def decode_pass1(self, memory: Tensor, src_pad: np.ndarray, gold_inputs: np.ndarray,
                     gold_targets: np.ndarray, train_mode: bool = False, rng=None,
                     dropout_rate: Optional[float] = None) -> DecoderOutput:
        """Teacher-forcing pass: gold (BOS-shifted) inputs, gold-prob readout."""
        gold_inputs = np.asarray(gold_inputs)
        gold_targets = np.asarray(gold_targets)
        if gold_inputs.shape != gold_targets.shape:
            raise ShapeError(
                f"decoder inputs {gold_inputs.shape} and targets {gold_targets.shape} disagree"
            )
        if not np.all(gold_inputs[:, 0] == BOS):
            raise ShapeError("decoder inputs must begin with BOS")
        raw = T.embedding_lookup(self.params["tgt_embed"], gold_inputs)
        logits = self._decode_from_embeddings(memory, src_pad, raw, train_mode, rng, dropout_rate)
        return self._output(logits, gold_targets)

    def decode_pass2(self, memory: Tensor, src_pad: np.ndarray, mixed: MixedInput,
                     gold_targets: np.ndarray, train_mode: bool = False, rng=None,
                     dropout_rate: Optional[float] = None) -> DecoderOutput:
        """Second pass over mixed inputs; same weights, same architecture."""
        logits = self._decode_from_embeddings(memory, src_pad, mixed.embeddings,
                                              train_mode, rng, dropout_rate)
        return self._output(logits, np.asarray(gold_targets))

    # -- inference ----------------------------------------------------------

    def step_scores(self, memory: Tensor, src_pad: np.ndarray, prefix: np.ndarray) -> np.ndarray:
        """Next-token log-probabilities for each prefix row (inference only)."""
        with T.no_grad():
            raw = T.embedding_lookup(self.params["tgt_embed"], prefix)
            logits = self._decode_from_embeddings(memory, src_pad, raw, False, None, None)
        return T.log_softmax_data(logits.data[:, -1, :], axis=-1)

    def greedy_decode(self, memory: Tensor, src_pad: np.ndarray, max_len: int) -> list[list[int]]:
        """Argmax decoding until EOS or max_len generated tokens per row."""
        from .decoding import greedy_search

        return greedy_search(
            lambda prefix: self.step_scores(memory, src_pad, prefix),
            batch_size=memory.shape[0],
            max_len=max_len,
        )

    def beam_decode(self, memory: Tensor, src_pad: np.ndarray, beam_size: int,
                    length_penalty_alpha: float, max_len: int) -> list[list[int]]:
        """Beam search under the GNMT length penalty ((5+n)/6)^alpha."""
        from .decoding import beam_search

        batch = memory.shape[0]
        pad_rep = np.repeat(src_pad, beam_size, axis=0)
        mem_rep = Tensor(np.repeat(memory.data, beam_size, axis=0))
        return beam_search(
            lambda prefix: self.step_scores(mem_rep, pad_rep, prefix),
            batch_size=batch, beam_size=beam_size,
            length_penalty_alpha=length_penalty_alpha, max_len=max_len,
        )
