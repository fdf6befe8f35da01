"""Autoregressive decoding: batched greedy search and beam search.

Both operate through a ``step_fn(prefix_rows) -> next-token log-probs``
closure so the search logic is independent of the model (and testable
against exhaustive enumeration on synthetic distributions).

Beam scores follow the GNMT length penalty: a finished hypothesis with
total log-probability s and n generated tokens (EOS included) scores
s / lp(n) with lp(n) = ((5 + n) / 6) ** alpha. Beam search remains an
inexact search; no optimality bound is promised or asserted.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .model import BOS, EOS, PAD

StepFn = Callable[[np.ndarray], np.ndarray]


def length_penalty(n_tokens: int, alpha: float) -> float:
    return ((5.0 + n_tokens) / 6.0) ** alpha


def greedy_search(step_fn: StepFn, batch_size: int, max_len: int,
                  banned: Sequence[int] = (BOS, PAD)) -> list[list[int]]:
    """Argmax decoding per row; stops at EOS or after max_len tokens."""
    tokens = np.full((batch_size, 1), BOS, dtype=np.int64)
    done = np.zeros(batch_size, dtype=bool)
    lengths = np.full(batch_size, max_len, dtype=np.int64)
    for step in range(max_len):
        logp = step_fn(tokens)
        logp[:, list(banned)] = -np.inf
        nxt = logp.argmax(axis=-1)
        nxt[done] = PAD
        newly = (~done) & (nxt == EOS)
        lengths[newly] = step
        done |= newly
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        if done.all():
            break
    return [tokens[b, 1 : 1 + lengths[b]].tolist() for b in range(batch_size)]


def beam_search(step_fn: StepFn, batch_size: int, beam_size: int,
                length_penalty_alpha: float, max_len: int,
                banned: Sequence[int] = (BOS, PAD)) -> list[list[int]]:
    """Batched beam search returning the best finished hypothesis per row.

    Each step ranks the top 2*beam_size candidates: an EOS candidate
    finalizes its hypothesis only when ranked within the top beam_size
    (the convention that makes beam_size=1 with alpha=0 coincide with
    greedy search); non-EOS candidates refill the beam. A row stops early
    once no alive beam can still beat its best finished score under the
    most favorable remaining length.
    """
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    B, K = batch_size, beam_size
    tokens = np.full((B, K, 1), BOS, dtype=np.int64)
    scores = np.full((B, K), -np.inf)
    scores[:, 0] = 0.0
    finished_score = np.full(B, -np.inf)
    finished_seq: list[list[int]] = [[] for _ in range(B)]
    has_finished = np.zeros(B, dtype=bool)

    for step in range(max_len):
        if np.all(scores == -np.inf):
            break
        logp = step_fn(tokens.reshape(B * K, -1))
        vocab = logp.shape[-1]
        logp = logp.reshape(B, K, vocab).copy()
        logp[..., list(banned)] = -np.inf
        cand = scores[..., None] + logp
        flat = cand.reshape(B, K * vocab)
        order = np.argsort(-flat, axis=-1, kind="stable")[:, : 2 * K]

        new_tokens = np.full((B, K, tokens.shape[-1] + 1), PAD, dtype=np.int64)
        new_scores = np.full((B, K), -np.inf)
        for b in range(B):
            if np.all(scores[b] == -np.inf):
                continue
            kept = 0
            for rank, flat_idx in enumerate(order[b]):
                total = flat[b, flat_idx]
                if total == -np.inf:
                    break
                beam, tok = divmod(int(flat_idx), vocab)
                if tok == EOS:
                    if rank < K:
                        final = total / length_penalty(step + 1, length_penalty_alpha)
                        if final > finished_score[b]:
                            finished_score[b] = final
                            finished_seq[b] = tokens[b, beam, 1:].tolist()
                        has_finished[b] = True
                elif kept < K:
                    new_tokens[b, kept, :-1] = tokens[b, beam]
                    new_tokens[b, kept, -1] = tok
                    new_scores[b, kept] = total
                    kept += 1
            if has_finished[b] and kept > 0:
                # most favorable completion: no further mass, longest length
                lp_ends = (
                    length_penalty(step + 2, length_penalty_alpha),
                    length_penalty(max_len, length_penalty_alpha),
                )
                bound = max(new_scores[b, 0] / lp for lp in lp_ends)
                if bound <= finished_score[b]:
                    new_scores[b, :] = -np.inf
        tokens, scores = new_tokens, new_scores

    out: list[list[int]] = []
    for b in range(B):
        if has_finished[b]:
            out.append(finished_seq[b])
        else:
            out.append(tokens[b, 0, 1:].tolist())
    return out
