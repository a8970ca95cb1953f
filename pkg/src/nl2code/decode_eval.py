"""Beam-search decoding and the evaluation metrics (corpus BLEU-4, token accuracy)."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Corpus, Vocabs, effective_intent
from .tensor import no_grad
from .tokenizer import BOS, EOS
from .transformer import TransformerModel

log = logging.getLogger(__name__)

StepFn = Callable[[np.ndarray], np.ndarray]
"""Maps prefixes ``(N, t)`` (bos-rooted) to next-token log-probs ``(N, V)``."""

LENGTH_PENALTY = 0.6


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float = 0.0
    finished: bool = False

    def score(self, alpha: float = LENGTH_PENALTY) -> float:
        n = max(len(self.tokens) - 1, 1)
        return self.logprob / n ** alpha


def beam_decode(step_fn: StepFn, beam: int = 2, max_len: int = 128,
                length_penalty: float = LENGTH_PENALTY, bos: int = BOS,
                eos: int = EOS) -> BeamHypothesis:
    """Beam search over ``step_fn``; returns the best hypothesis (bos-rooted).

    Finished hypotheses compete on ``logprob / generated_len ** length_penalty``.
    Equal scores resolve towards lower token ids, so output is deterministic.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    live = [BeamHypothesis([bos])]
    finished: list[BeamHypothesis] = []
    for t in range(max_len):
        lp = step_fn(np.array([h.tokens for h in live], dtype=np.int64))
        cands = []
        for i, h in enumerate(live):
            top = np.argsort(-lp[i], kind="stable")[:beam]
            for k in top:
                cands.append((h.logprob + float(lp[i, k]), i, int(k)))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for score, i, k in cands[:beam]:
            h = BeamHypothesis(live[i].tokens + [k], score, k == eos)
            (finished if h.finished else nxt).append(h)
        live = nxt
        if not live:
            break
        if finished:
            # no live hypothesis can beat this: logprob only falls, length is capped
            best_fin = max(h.score(length_penalty) for h in finished)
            bound = max(h.logprob for h in live) / max_len ** length_penalty
            if best_fin >= bound:
                break
    pool = finished or live
    best = pool[0]
    for h in pool[1:]:
        if h.score(length_penalty) > best.score(length_penalty):
            best = h
    return best


def strip_specials(tokens: Sequence[int], bos: int = BOS, eos: int = EOS) -> list[int]:
    out = list(tokens)
    if out and out[0] == bos:
        out = out[1:]
    if out and out[-1] == eos:
        out = out[:-1]
    return out


def model_step_fn(model: TransformerModel, src_ids: Sequence[int]) -> StepFn:
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    mask = np.ones(src.shape, dtype=bool)
    with no_grad():
        memory = model.encode(src, mask)
    return lambda prefixes: model.next_log_probs(memory, mask, prefixes)


def beam_search(model: TransformerModel, src_ids: Sequence[int], beam: int = 2,
                max_len: int | None = None,
                length_penalty: float = LENGTH_PENALTY) -> list[int]:
    """Decode one framed source sequence; bos/eos are stripped from the result."""
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if model.training:
        raise RuntimeError("beam_search expects a model in eval mode")
    max_len = max_len or model.cfg.max_len - 1
    max_len = min(max_len, model.cfg.max_len - 1)
    best = beam_decode(model_step_fn(model, src_ids), beam, max_len, length_penalty)
    return strip_specials(best.tokens)


def greedy_decode(model: TransformerModel, src_ids: Sequence[int],
                  max_len: int | None = None) -> list[int]:
    max_len = min(max_len or model.cfg.max_len - 1, model.cfg.max_len - 1)
    step = model_step_fn(model, src_ids)
    out = [BOS]
    for _ in range(max_len):
        k = int(np.argmax(step(np.array([out]))[0]))
        out.append(k)
        if k == EOS:
            break
    return strip_specials(out)


# -- metrics --------------------------------------------------------------------

def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(reference: Sequence, hypothesis: Sequence, max_n: int = 4):
    """Clipped n-gram matches and hypothesis n-gram totals for n = 1..max_n."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h, r = _ngrams(hypothesis, n), _ngrams(reference, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hypothesis) - n + 1, 0))
    return matches, totals, len(hypothesis), len(reference)


def _bleu_from_stats(matches, totals, hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    logp = math.log(matches[0] / totals[0])
    for m, t in zip(matches[1:], totals[1:]):
        # add-one smoothing only where nothing matched
        logp += math.log((m + 1) / (t + 1)) if m == 0 else math.log(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(logp / len(matches))


def corpus_bleu(references: Sequence[Sequence], hypotheses: Sequence[Sequence],
                max_n: int = 4) -> float:
    """Corpus-level BLEU-4 on a 0-100 scale, one reference per hypothesis."""
    if len(references) != len(hypotheses):
        raise ValueError(
            f"{len(references)} references vs {len(hypotheses)} hypotheses")
    if not references:
        raise ValueError("corpus_bleu of an empty corpus")
    M, Tt = [0] * max_n, [0] * max_n
    c = r = 0
    for ref, hyp in zip(references, hypotheses):
        m, t, hl, rl = bleu_stats(ref, hyp, max_n)
        M = [a + b for a, b in zip(M, m)]
        Tt = [a + b for a, b in zip(Tt, t)]
        c += hl
        r += rl
    return _bleu_from_stats(M, Tt, c, r)


def sentence_bleu(reference: Sequence, hypothesis: Sequence) -> float:
    return corpus_bleu([reference], [hypothesis])


def token_accuracy(references: Sequence[Sequence], hypotheses: Sequence[Sequence]) -> float:
    """Corpus-level clipped unigram precision in [0, 1]."""
    if len(references) != len(hypotheses):
        raise ValueError(
            f"{len(references)} references vs {len(hypotheses)} hypotheses")
    hit = total = 0
    for ref, hyp in zip(references, hypotheses):
        r = Counter(ref)
        hit += sum(min(c, r[g]) for g, c in Counter(hyp).items())
        total += len(hyp)
    if total == 0:
        log.warning("token_accuracy: every hypothesis is empty")
        return 0.0
    return hit / total


# -- evaluation -------------------------------------------------------------------

@dataclass
class ExampleResult:
    intent: str
    hypothesis: str
    reference: str
    bleu: float


@dataclass
class EvalReport:
    corpus_bleu: float
    token_accuracy: float
    zero_bleu_count: int
    num_examples: int
    per_example: list[ExampleResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_example")
        return d

    def write(self, report_path, examples_path=None) -> None:
        Path(report_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        if examples_path is not None:
            with open(examples_path, "w", encoding="utf-8") as fh:
                for r in self.per_example:
                    fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")


def evaluate(model: TransformerModel, test: Corpus, vocabs: Vocabs, beam: int = 2,
             max_len: int | None = None) -> EvalReport:
    """Beam-decode every test intent and score against the reference snippets.

    Both sides are re-tokenised with the snippet vocabulary, so BLEU and
    token accuracy are measured over snippet subword pieces.
    """
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    was_training = model.training
    model.eval()
    sv = vocabs.snippet
    limit = model.cfg.max_len
    refs, hyps, rows = [], [], []
    try:
        for ex in test:
            intent = effective_intent(ex)
            src = vocabs.intent.encode(intent, add_bos_eos=True)
            if len(src) > limit:
                src = src[:limit - 1] + [EOS]
            hyp_text = sv.decode(beam_search(model, src, beam, max_len))
            h = sv.pieces(sv.encode(hyp_text))
            r = sv.pieces(sv.encode(ex.snippet))
            refs.append(r)
            hyps.append(h)
            rows.append(ExampleResult(intent, hyp_text, ex.snippet, sentence_bleu(r, h)))
    finally:
        model.training = was_training
    return EvalReport(
        corpus_bleu=corpus_bleu(refs, hyps),
        token_accuracy=token_accuracy(refs, hyps),
        zero_bleu_count=sum(r.bleu == 0.0 for r in rows),
        num_examples=len(rows),
        per_example=rows,
        metadata={"bleu_tokens": "snippet-vocab subword pieces", "beam": beam,
                  "length_penalty": LENGTH_PENALTY, "smoothing": "add-one for n>=2 when no match"},
    )
