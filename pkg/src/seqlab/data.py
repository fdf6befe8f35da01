"""Synthetic translation tasks, batching, and dataset file I/O.

Targets are deterministic functions of sources (copy, reverse, or a fixed
token permutation), so any accuracy shortfall is attributable to the model.
Splits are generated from independent seeds; valid and test are additionally
deduplicated against train (and each other) so held-out scores measure
generalization, not recall.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import BOS, EOS, N_RESERVED, PAD

Pair = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass
class SyntheticTask:
    variant: str = "reverse"  # copy | reverse | lexicon
    vocab_size: int = 32
    len_min: int = 5
    len_max: int = 20
    n_train: int = 10_000
    n_valid: int = 1_000
    n_test: int = 1_000
    seed_train: int = 11
    seed_valid: int = 22
    seed_test: int = 33
    lexicon_seed: int = 7

    def __post_init__(self):
        if self.variant not in ("copy", "reverse", "lexicon"):
            raise ConfigError(f"unknown task variant {self.variant!r}")
        if self.vocab_size <= N_RESERVED:
            raise ConfigError(f"vocab_size must exceed {N_RESERVED} reserved tokens")
        if not 1 <= self.len_min <= self.len_max:
            raise ConfigError(f"invalid length range [{self.len_min}, {self.len_max}]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        return cls(**d)

    def content_permutation(self) -> np.ndarray:
        """Token map for the lexicon variant: identity on reserved indices,
        a seeded permutation of the content indices."""
        perm = np.arange(self.vocab_size)
        content = np.arange(N_RESERVED, self.vocab_size)
        shuffled = content.copy()
        np.random.default_rng(self.lexicon_seed).shuffle(shuffled)
        perm[content] = shuffled
        return perm

    def target_for(self, src: tuple[int, ...]) -> tuple[int, ...]:
        if self.variant == "copy":
            return tuple(src)
        if self.variant == "reverse":
            return tuple(reversed(src))
        perm = self.content_permutation()
        return tuple(int(perm[t]) for t in src)


def _sentence_stream(task: SyntheticTask, seed: int):
    rng = np.random.default_rng(seed)
    while True:
        n = int(rng.integers(task.len_min, task.len_max + 1))
        yield tuple(int(t) for t in rng.integers(N_RESERVED, task.vocab_size, size=n))


def generate_task(task: SyntheticTask) -> dict[str, list[Pair]]:
    """Deterministic train/valid/test splits for one task."""
    train_srcs: list[tuple[int, ...]] = []
    stream = _sentence_stream(task, task.seed_train)
    for _ in range(task.n_train):
        train_srcs.append(next(stream))
    taken = set(train_srcs)

    def held_out(seed: int, count: int) -> list[tuple[int, ...]]:
        out = []
        stream = _sentence_stream(task, seed)
        attempts = 0
        while len(out) < count:
            attempts += 1
            if attempts > 200 * count + 10_000:
                raise ConfigError(
                    f"cannot draw {count} held-out sentences disjoint from train; "
                    "the task's sentence space is too small"
                )
            s = next(stream)
            if s not in taken:
                taken.add(s)
                out.append(s)
        return out

    splits = {
        "train": train_srcs,
        "valid": held_out(task.seed_valid, task.n_valid),
        "test": held_out(task.seed_test, task.n_test),
    }
    return {name: [(s, task.target_for(s)) for s in srcs] for name, srcs in splits.items()}


@dataclass
class Batch:
    src: np.ndarray         # [batch, src_len] int64
    src_pad: np.ndarray     # [batch, src_len] bool, True at padding
    tgt_input: np.ndarray   # [batch, tgt_len] BOS-shifted
    tgt_output: np.ndarray  # [batch, tgt_len] EOS-terminated
    tgt_mask: np.ndarray    # [batch, tgt_len] 1.0 at real positions (incl. EOS)
    src_lengths: np.ndarray
    tgt_lengths: np.ndarray  # real target positions = sentence length + 1

    @property
    def n_sentences(self) -> int:
        return self.src.shape[0]


def make_batch(pairs: list[Pair]) -> Batch:
    """Pad a list of (src, tgt) pairs into aligned matrices.

    tgt_input[t] equals tgt_output[t-1] at every real position t >= 1, and
    tgt_input[0] is BOS.
    """
    if not pairs:
        raise DataError("cannot batch zero sentences")
    src_lens = np.array([len(s) for s, _ in pairs], dtype=np.int64)
    tgt_lens = np.array([len(t) + 1 for _, t in pairs], dtype=np.int64)
    S, Tn = int(src_lens.max()), int(tgt_lens.max())
    B = len(pairs)
    src = np.full((B, S), PAD, dtype=np.int64)
    tgt_input = np.full((B, Tn), PAD, dtype=np.int64)
    tgt_output = np.full((B, Tn), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tgt_input[i, 0] = BOS
        tgt_input[i, 1 : len(t) + 1] = t
        tgt_output[i, : len(t)] = t
        tgt_output[i, len(t)] = EOS
    src_pad = src == PAD
    tgt_mask = (np.arange(Tn)[None, :] < tgt_lens[:, None]).astype(np.float64)
    return Batch(src, src_pad, tgt_input, tgt_output, tgt_mask, src_lens, tgt_lens)


def sample_batch(pairs: list[Pair], batch_size: int, rng: np.random.Generator) -> Batch:
    """Draw a uniform batch (with replacement); one rng call per step keeps
    resume-from-checkpoint replay exact."""
    idx = rng.integers(0, len(pairs), size=batch_size)
    return make_batch([pairs[i] for i in idx])


def save_pairs(path: str | Path, pairs: list[Pair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in pairs:
            fh.write(" ".join(map(str, s)) + " ||| " + " ".join(map(str, t)) + "\n")


def load_pairs(path: str | Path) -> list[Pair]:
    pairs: list[Pair] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("|||")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'src ||| tgt', got {line!r}")
            try:
                src = tuple(int(t) for t in parts[0].split())
                tgt = tuple(int(t) for t in parts[1].split())
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer token ({exc})") from exc
            if not src or not tgt:
                raise DataError(f"{path}:{lineno}: empty side")
            pairs.append((src, tgt))
    if not pairs:
        raise DataError(f"{path}: no sentence pairs found")
    return pairs
