"""Synthetic paired tasks for exercising the training loops at toy scale."""

from __future__ import annotations

import numpy as np

from .data import ANNOTATED, MINED, Batch, EncodedExample
from .tokenizer import BOS, EOS


def reversal_pairs(n: int, vocab: int = 16, min_len: int = 2, max_len: int = 5,
                   seed: int = 0, source: str = ANNOTATED) -> list[EncodedExample]:
    """``n`` distinct (sequence, reversed sequence) pairs over ids ``4..vocab-1``.

    Both sides are bos/eos framed and share the id space, so the task is a
    bijection and its own inverse.
    """
    rng = np.random.default_rng(seed)
    alphabet = np.arange(4, vocab)
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < n:
        L = int(rng.integers(min_len, max_len + 1))
        body = tuple(int(t) for t in rng.choice(alphabet, size=L))
        if body in seen:
            continue
        seen.add(body)
        out.append(EncodedExample((BOS, *body, EOS), (BOS, *body[::-1], EOS), source))
    return out


def split_pool(pairs: list[EncodedExample], n_annotated: int) -> tuple[list[EncodedExample], list[EncodedExample]]:
    """First ``n_annotated`` rows stay annotated; the rest are relabelled mined."""
    ann = pairs[:n_annotated]
    mined = [EncodedExample(p.src, p.tgt, MINED) for p in pairs[n_annotated:]]
    return ann, mined


def batch_of(rows: list[EncodedExample]) -> Batch:
    return Batch.collate(rows)
