"""Byte-pair-encoding subword tokenizer.

Text is cut into words at every space, and the space stays attached to the
front of the word it precedes, so it acts as the word-boundary marker and the
concatenation of a word sequence is always the original string. Merges never
cross word boundaries. Base symbols are the characters seen during training;
anything else encodes to ``<unk>``.
"""

from __future__ import annotations

import heapq
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
SPECIAL_NAMES = ("pad", "bos", "eos", "unk")

_WORD_SPLIT = re.compile(r"(?= )")


def split_words(text: str) -> list[str]:
    return [w for w in _WORD_SPLIT.split(text) if w]


@dataclass
class Vocab:
    id_to_piece: list[str]
    merges: list[tuple[str, str]]
    piece_to_id: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.id_to_piece[:4]) != SPECIALS:
            raise ValueError("ids 0-3 must hold the special tokens")
        self.piece_to_id = {p: i for i, p in enumerate(self.id_to_piece)}
        if len(self.piece_to_id) != len(self.id_to_piece):
            raise ValueError("duplicate piece in vocabulary")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache = {}

    def __len__(self) -> int:
        return len(self.id_to_piece)

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    unk_id = UNK

    def _encode_word(self, word: str) -> tuple[int, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        syms = list(word)
        ranks = self._ranks
        while len(syms) > 1:
            best, best_rank = None, None
            for pair in zip(syms, syms[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            syms = _merge_symbols(syms, best)
        ids = tuple(self.piece_to_id.get(s, UNK) for s in syms)
        self._cache[word] = ids
        return ids

    def encode(self, text: str, add_bos_eos: bool = False) -> list[int]:
        ids = [BOS] if add_bos_eos else []
        for w in split_words(text):
            ids.extend(self._encode_word(w))
        if add_bos_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        n = len(self.id_to_piece)
        for i in ids:
            i = int(i)
            if i < 0 or i >= n:
                raise ValueError(f"token id {i} outside vocabulary of size {n}")
            if i < 4:
                # unk has no surface form; pad/bos/eos are framing
                continue
            out.append(self.id_to_piece[i])
        return "".join(out)

    def pieces(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_piece[int(i)] for i in ids]

    # -- files ------------------------------------------------------------
    def save(self, vocab_path, merges_path) -> None:
        lines = [f"{name}\t{i}\t{_escape(SPECIALS[i])}"
                 for i, name in enumerate(SPECIAL_NAMES)]
        lines += [_escape(p) for p in self.id_to_piece]
        Path(vocab_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        Path(merges_path).write_text(
            "".join(f"{_escape(a)} {_escape(b)}\n" for a, b in self.merges),
            encoding="utf-8")

    @classmethod
    def load(cls, vocab_path, merges_path) -> Vocab:
        lines = Path(vocab_path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        header, body = lines[:4], lines[4:]
        for i, (name, line) in enumerate(zip(SPECIAL_NAMES, header)):
            if line.split("\t")[:2] != [name, str(i)]:
                raise ValueError(f"{vocab_path}: bad header line {i + 1}: {line!r}")
        pieces = [_unescape(x) for x in body]
        merges = []
        for k, line in enumerate(Path(merges_path).read_text(encoding="utf-8").splitlines()):
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{merges_path}:{k + 1}: expected 'left right'")
            merges.append((_unescape(parts[0]), _unescape(parts[1])))
        return cls(pieces, merges)


def _merge_symbols(syms: Sequence[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    n = len(syms)
    while i < n:
        if i + 1 < n and syms[i] == a and syms[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def train_vocab(corpus: Sequence[str], vocab_size: int = 4000) -> Vocab:
    """Greedy BPE: merge the most frequent adjacent pair until the vocabulary
    holds ``vocab_size`` pieces. Ties go to the lexicographically smallest pair.

    Small corpora can run out of pairs before the target size; the remaining
    ids are filled with inert ``<unused-N>`` pieces that encode never emits,
    so the size contract still holds.
    """
    if not corpus:
        raise ValueError("cannot train a vocabulary on an empty corpus")
    word_freq = Counter(w for text in corpus for w in split_words(text))
    alphabet = sorted({ch for w in word_freq for ch in w})
    if vocab_size < len(alphabet) + len(SPECIALS):
        raise ValueError(
            f"vocab_size {vocab_size} cannot hold {len(SPECIALS)} specials "
            f"plus the {len(alphabet)}-symbol base alphabet")

    pieces = list(SPECIALS) + alphabet
    known = set(pieces)
    merges: list[tuple[str, str]] = []

    words = [list(w) for w in word_freq]
    freqs = list(word_freq.values())
    pair_count: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_count[pair] += freqs[wi]
            where[pair].add(wi)
    heap = [(-c, p) for p, c in pair_count.items()]
    heapq.heapify(heap)
    banned: set[tuple[str, str]] = set()

    while len(pieces) < vocab_size and heap:
        negc, pair = heapq.heappop(heap)
        if pair in banned or pair_count.get(pair, 0) != -negc or negc == 0:
            continue
        merged = pair[0] + pair[1]
        if merged in SPECIALS:
            banned.add(pair)
            continue
        merges.append(pair)
        if merged not in known:
            known.add(merged)
            pieces.append(merged)
        touched: set[tuple[str, str]] = set()
        for wi in list(where[pair]):
            syms = words[wi]
            f = freqs[wi]
            for p in zip(syms, syms[1:]):
                pair_count[p] -= f
                touched.add(p)
            new = _merge_symbols(syms, pair)
            words[wi] = new
            for p in zip(new, new[1:]):
                pair_count[p] += f
                where[p].add(wi)
                touched.add(p)
        for p in touched:
            c = pair_count[p]
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_count.pop(p, None)
                where.pop(p, None)

    k = 0
    while len(pieces) < vocab_size:
        name = f"<unused-{k}>"
        k += 1
        if name not in known:
            pieces.append(name)
    return Vocab(pieces, merges)


_ESC = {"\\": "\\\\", " ": "▁", "▁": "\\u2581", "\n": "\\n",
        "\t": "\\t", "\r": "\\r"}


_LINE_BREAKERS = "\x7f\x85\u2028\u2029"


def _escape(piece: str) -> str:
    out = []
    for ch in piece:
        e = _ESC.get(ch)
        if e is None and (ord(ch) < 32 or ch in _LINE_BREAKERS):
            e = f"\\u{ord(ch):04x}"
        out.append(ch if e is None else e)
    return "".join(out)


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "▁":
            out.append(" ")
        elif ch == "\\":
            nxt = text[i + 1]
            if nxt == "u":
                out.append(chr(int(text[i + 2:i + 6], 16)))
                i += 5
            else:
                out.append({"\\": "\\", "n": "\n", "t": "\t", "r": "\r"}[nxt])
                i += 1
        else:
            out.append(ch)
        i += 1
    return "".join(out)
