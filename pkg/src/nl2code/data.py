"""CoNaLa-format corpora, batching, and the mined-data training regimes.

Annotated file: one JSON array of ``{intent, rewritten_intent, snippet,
question_id}`` objects. Mined file: JSON lines with at least ``intent`` and
``snippet``; other fields (``prob``, ``id``, ...) are ignored.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .tokenizer import EOS, PAD, Vocab

log = logging.getLogger(__name__)

ANNOTATED = "annotated"
MINED = "mined"


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    intent: str
    snippet: str
    source: str = ANNOTATED
    rewritten_intent: str | None = None
    question_id: int | None = None

    def __post_init__(self):
        if not self.intent:
            raise ValueError("intent must be non-empty")
        if not self.snippet:
            raise ValueError("snippet must be non-empty")


@dataclass
class Corpus:
    examples: list[Example]
    split: str = "train"

    def __post_init__(self):
        if self.split == "test" and any(e.source != ANNOTATED for e in self.examples):
            raise ValueError("a test corpus may only hold annotated examples")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def effective_intent(ex: Example) -> str:
    return ex.rewritten_intent if ex.rewritten_intent is not None else ex.intent


def _field(rec, i: int, name: str, kind, nullable: bool, where: str, required: bool = True):
    if not isinstance(rec, dict):
        raise CorpusFormatError(f"{where}: record {i} is not an object")
    if name not in rec:
        if required:
            raise CorpusFormatError(f"{where}: record {i} is missing field '{name}'")
        return None
    val = rec[name]
    if val is None and nullable:
        return None
    if kind is int and isinstance(val, bool) or not isinstance(val, kind):
        raise CorpusFormatError(
            f"{where}: record {i} field '{name}' has type {type(val).__name__}")
    if kind is str and not val and not nullable:
        raise CorpusFormatError(f"{where}: record {i} field '{name}' is empty")
    return val


def load_annotated(path, split: str = "train") -> Corpus:
    path = Path(path)
    records = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(records, list):
        raise CorpusFormatError(f"{path}: expected a JSON array of records")
    out = []
    for i, rec in enumerate(records):
        out.append(Example(
            intent=_field(rec, i, "intent", str, False, str(path)),
            snippet=_field(rec, i, "snippet", str, False, str(path)),
            source=ANNOTATED,
            rewritten_intent=_field(rec, i, "rewritten_intent", str, True, str(path),
                                    required=False),
            question_id=_field(rec, i, "question_id", int, True, str(path),
                               required=False),
        ))
    return Corpus(out, split)


def load_mined(path, limit: int | None = None, shuffle_seed: int | None = None) -> Corpus:
    """First ``limit`` records in file order (or after a seeded shuffle)."""
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        lines = (ln for ln in fh if ln.strip())
        for i, line in enumerate(lines):
            if shuffle_seed is None and limit is not None and len(out) >= limit:
                break
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{path}: record {i} is not valid JSON: {e}") from None
            out.append(Example(
                intent=_field(rec, i, "intent", str, False, str(path)),
                snippet=_field(rec, i, "snippet", str, False, str(path)),
                source=MINED,
                question_id=_field(rec, i, "question_id", int, True, str(path),
                                   required=False),
            ))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(out))
        out = [out[k] for k in order]
        if limit is not None:
            out = out[:limit]
    return Corpus(out, "train")


# -- encoding and batching ------------------------------------------------------

class Vocabs(NamedTuple):
    intent: Vocab
    snippet: Vocab


@dataclass(frozen=True)
class EncodedExample:
    src: tuple[int, ...]
    tgt: tuple[int, ...]
    source: str


def _frame(vocab: Vocab, text: str, max_len: int) -> tuple[tuple[int, ...], bool]:
    ids = vocab.encode(text, add_bos_eos=True)
    if len(ids) > max_len:
        return tuple(ids[:max_len - 1]) + (EOS,), True
    return tuple(ids), False


def encode_corpus(corpus: Corpus | Sequence[Example], vocabs: Vocabs,
                  max_len: int = 128) -> tuple[list[EncodedExample], int]:
    """Frame every example as (intent ids, snippet ids); returns the number of
    examples where either side had to be cut to ``max_len``."""
    out = []
    cut = 0
    for ex in corpus:
        src, a = _frame(vocabs.intent, effective_intent(ex), max_len)
        tgt, b = _frame(vocabs.snippet, ex.snippet, max_len)
        cut += a or b
        out.append(EncodedExample(src, tgt, ex.source))
    if cut:
        log.info("truncated %d of %d examples to max_len=%d", cut, len(out), max_len)
    return out, cut


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


@dataclass
class Batch:
    src: np.ndarray
    tgt: np.ndarray
    sources: tuple[str, ...]
    truncated: int = 0
    src_mask: np.ndarray = field(init=False)
    tgt_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.src_mask = self.src != PAD
        self.tgt_mask = self.tgt != PAD

    def __len__(self) -> int:
        return self.src.shape[0]

    @classmethod
    def collate(cls, rows: Sequence[EncodedExample], truncated: int = 0) -> Batch:
        if not rows:
            raise ValueError("cannot build an empty batch")
        return cls(pad_batch([r.src for r in rows]), pad_batch([r.tgt for r in rows]),
                   tuple(r.source for r in rows), truncated)

    def swapped(self) -> Batch:
        """Same rows with source and target exchanged (code -> text direction)."""
        return Batch(self.tgt, self.src, self.sources, self.truncated)

    def select(self, which: Sequence[int] | np.ndarray) -> Batch:
        which = np.asarray(which)
        src, tgt = self.src[which], self.tgt[which]
        src = src[:, :max(1, int((src != PAD).sum(1).max()))]
        tgt = tgt[:, :max(1, int((tgt != PAD).sum(1).max()))]
        return Batch(src, tgt, tuple(self.sources[k] for k in which), self.truncated)


def make_batches(corpus: Corpus | Sequence[Example], vocabs: Vocabs, batch_size: int = 32,
                 shuffle_seed: int | None = 0, epoch: int = 0,
                 max_len: int = 128) -> Iterator[Batch]:
    """One epoch of padded batches, shuffled by ``(shuffle_seed, epoch)``."""
    rows, cut = encode_corpus(corpus, vocabs, max_len)
    order = np.arange(len(rows))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(rows))
    for start in range(0, len(rows), batch_size):
        yield Batch.collate([rows[k] for k in order[start:start + batch_size]], cut)


class SampleStream:
    """Endless reshuffled pass over a pool, addressable by absolute position.

    Position ``p`` is element ``p % N`` of the permutation for epoch ``p // N``,
    so any slice can be recomputed from the seed alone (used for resume).
    """

    def __init__(self, pool: Sequence[EncodedExample], seed: int, stream_id: int = 0):
        self.pool = pool
        self.seed = seed
        self.stream_id = stream_id
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        p = self._perms.get(epoch)
        if p is None:
            if len(self._perms) > 4:
                self._perms.clear()
            p = np.random.default_rng([self.seed, self.stream_id, epoch]).permutation(len(self.pool))
            self._perms[epoch] = p
        return p

    def take(self, start: int, n: int) -> list[EncodedExample]:
        N = len(self.pool)
        if N == 0:
            raise ValueError("cannot draw from an empty corpus")
        return [self.pool[self._perm(pos // N)[pos % N]] for pos in range(start, start + n)]


@dataclass
class RegimeConfig:
    kind: str = "sample"
    alpha: float = 1.0
    pretrain_steps: int = 1000
    mined_limit: int = 100000
    shuffle_mined: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("mix", "sample", "finetune"):
            raise ValueError(f"unknown regime {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.pretrain_steps < 1:
            raise ValueError("pretrain_steps must be positive")
        if self.mined_limit < 0:
            raise ValueError("mined_limit must be non-negative")


class RegimeBatchSource:
    """Deterministic per-step batches for the Mix / Sample / Finetune regimes."""

    def __init__(self, regime: RegimeConfig, annotated: Sequence[EncodedExample],
                 mined: Sequence[EncodedExample], batch_size: int = 32, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.regime = regime
        self.batch_size = batch_size
        self.annotated = SampleStream(annotated, seed, 1)
        self.mined = SampleStream(mined, seed, 2)
        self.union = SampleStream(list(annotated) + list(mined), seed, 3)

    def batch(self, step: int) -> tuple[Batch, np.ndarray]:
        """Batch and per-row loss weights for 1-based optimizer ``step``."""
        if step < 1:
            raise ValueError("steps are 1-based")
        B = self.batch_size
        r = self.regime
        if r.kind == "mix":
            rows = self.union.take((step - 1) * B, B)
            weights = np.ones(B)
        elif r.kind == "sample":
            na = (B + 1) // 2
            nm = B - na
            rows = self.annotated.take((step - 1) * na, na) + self.mined.take((step - 1) * nm, nm)
            weights = np.array([1.0] * na + [r.alpha] * nm)
        else:
            if step <= r.pretrain_steps:
                rows = self.mined.take((step - 1) * B, B)
            else:
                rows = self.annotated.take((step - r.pretrain_steps - 1) * B, B)
            weights = np.ones(B)
        return Batch.collate(rows), weights


def regime_batch_source(regime: RegimeConfig, annotated: Sequence[EncodedExample],
                        mined: Sequence[EncodedExample], step: int, batch_size: int = 32,
                        seed: int = 0) -> tuple[Batch, np.ndarray]:
    return RegimeBatchSource(regime, annotated, mined, batch_size, seed).batch(step)
