"""Corpus metrics: BLEU, token and sequence accuracy, length-bucketed reports.

BLEU is the corpus-level geometric mean of modified (clipped) n-gram
precisions, n = 1..4, times the brevity penalty, with no smoothing: zero
matches at any order zeroes the score. An order whose candidate n-gram
count is zero across the whole corpus (every candidate shorter than n) is
undefined rather than zero and drops out of the mean; this keeps identity
corpora at BLEU 1 regardless of sentence length and only matters below
4-token sentences. Scores operate on token-id sequences, in [0, 1].

Token accuracy compares aligned positions only (up to the shorter of
candidate and reference), so an early-stopping candidate is scored on what
it produced rather than diluted by its missing tail, and sentences are
averaged with equal weight: per-sentence aligned accuracy is 1 exactly when
the overlap is perfect, which is what keeps token accuracy >= exact-match
sequence accuracy on every corpus (a token-weighted average loses that
bound when short sentences are the correct ones).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass


from .errors import DataError

Seq = list[int] | tuple[int, ...]


def _ngrams(seq: Seq, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(candidates: list[Seq], references: list[Seq], max_ngram: int = 4) -> float:
    """Corpus BLEU with clipped n-gram counts and brevity penalty."""
    if len(candidates) != len(references):
        raise DataError(
            f"candidate/reference counts differ: {len(candidates)} vs {len(references)}"
        )
    if not candidates:
        raise DataError("BLEU of an empty corpus is undefined")
    matches = [0] * max_ngram
    totals = [0] * max_ngram
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_ngram + 1):
            cn = _ngrams(cand, n)
            if not cn:
                continue
            rn = _ngrams(ref, n)
            totals[n - 1] += sum(cn.values())
            matches[n - 1] += sum(min(c, rn.get(g, 0)) for g, c in cn.items())
    if cand_len == 0:
        return 0.0
    defined = [(m, t) for m, t in zip(matches, totals) if t > 0]
    if not defined or any(m == 0 for m, _ in defined):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in defined) / len(defined)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_prec)


def token_accuracy(candidates: list[Seq], references: list[Seq]) -> float:
    if not references:
        return 0.0
    acc = 0.0
    for cand, ref in zip(candidates, references):
        k = min(len(cand), len(ref))
        if k == 0:
            acc += 1.0 if len(cand) == len(ref) else 0.0
        else:
            acc += sum(1 for i in range(k) if cand[i] == ref[i]) / k
    return acc / len(references)


def sequence_accuracy(candidates: list[Seq], references: list[Seq]) -> float:
    if not references:
        return 0.0
    hits = sum(1 for c, r in zip(candidates, references) if list(c) == list(r))
    return hits / len(references)


@dataclass
class BucketReport:
    len_lo: int
    len_hi: int
    count: int
    token_acc: float
    seq_acc: float
    bleu: float


@dataclass
class EvalReport:
    n_sentences: int
    token_acc: float
    seq_acc: float
    bleu: float
    buckets: list[BucketReport]
    decode: str = "greedy"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["buckets"] = [asdict(b) for b in self.buckets]
        return d


def bucket_edges(len_min: int, len_max: int, n_buckets: int = 4) -> list[tuple[int, int]]:
    """Contiguous buckets of width ceil((len_max - len_min) / n_buckets)."""
    width = max(1, math.ceil((len_max - len_min) / n_buckets))
    edges = []
    lo = len_min
    while lo <= len_max:
        edges.append((lo, min(lo + width - 1, len_max)))
        lo += width
    return edges


def score_corpus(candidates: list[Seq], references: list[Seq], src_lengths: list[int],
                 n_buckets: int = 4, decode: str = "greedy") -> EvalReport:
    """Aggregate corpus metrics plus per-source-length-bucket breakdown."""
    if not (len(candidates) == len(references) == len(src_lengths)):
        raise DataError("candidates, references, and lengths must align")
    edges = bucket_edges(min(src_lengths), max(src_lengths), n_buckets)
    buckets = []
    for lo, hi in edges:
        idx = [i for i, n in enumerate(src_lengths) if lo <= n <= hi]
        if idx:
            bc = [candidates[i] for i in idx]
            br = [references[i] for i in idx]
            buckets.append(BucketReport(lo, hi, len(idx), token_accuracy(bc, br),
                                        sequence_accuracy(bc, br), corpus_bleu(bc, br)))
        else:
            buckets.append(BucketReport(lo, hi, 0, 0.0, 0.0, 0.0))
    return EvalReport(
        n_sentences=len(references),
        token_acc=token_accuracy(candidates, references),
        seq_acc=sequence_accuracy(candidates, references),
        bleu=corpus_bleu(candidates, references),
        buckets=buckets,
        decode=decode,
    )


def decode_corpus(model, pairs, decode: str = "greedy", beam_size: int = 4,
                  length_penalty_alpha: float = 0.6, max_len: int | None = None,
                  batch_size: int = 128) -> list[list[int]]:
    """Decode every source sentence with a frozen model snapshot."""
    from .data import make_batch

    if max_len is None:
        max_len = min(model.config.max_len - 1, max(len(t) for _, t in pairs) + 4)
    out: list[list[int]] = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        batch = make_batch(chunk)
        memory = model.encode(batch.src, batch.src_pad)
        if decode == "greedy":
            out.extend(model.greedy_decode(memory, batch.src_pad, max_len))
        elif decode == "beam":
            out.extend(model.beam_decode(memory, batch.src_pad, beam_size,
                                         length_penalty_alpha, max_len))
        else:
            raise DataError(f"unknown decode mode {decode!r}")
    return out


def evaluate(model, pairs, decode: str = "greedy", beam_size: int = 4,
             length_penalty_alpha: float = 0.6, max_len: int | None = None,
             batch_size: int = 128, n_buckets: int = 4) -> EvalReport:
    """Decode a split and score it, including length-bucketed metrics."""
    candidates = decode_corpus(model, pairs, decode, beam_size,
                               length_penalty_alpha, max_len, batch_size)
    references = [list(t) for _, t in pairs]
    src_lengths = [len(s) for s, _ in pairs]
    return score_corpus(candidates, references, src_lengths, n_buckets, decode)
