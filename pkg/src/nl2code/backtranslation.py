"""Differentiable back-translation and cycle-consistency training.

A translator's output is kept as a sequence of vocabulary distributions
(:class:`SoftSequence`) instead of argmax tokens. The next translator embeds
each row as the probability-weighted sum of its embedding rows, so a loss on
the far end of ``code -> text -> code`` (or the reverse) reaches both models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Batch
from .decode_eval import beam_search, token_accuracy
from .optim import Adam, clip_grad_norm
from .tensor import Tensor
from .tokenizer import BOS, EOS, PAD
from .transformer import NEG_INF, NEVER_EMIT, TransformerModel

MODES = ("ctc", "ctc-noise", "tct", "cycle")


@dataclass
class SoftSequence:
    """Per-row distributions ``dists`` ``(B, L, V)`` plus stop positions.

    ``stop_lengths[b]`` is the first position whose argmax is eos, or L when
    the row never stopped. Rows ``0..stop_lengths[b]`` (the eos row included)
    carry content; anything after is padding.
    """

    dists: Tensor
    stop_lengths: np.ndarray

    @property
    def length(self) -> int:
        return self.dists.shape[1]

    def lengths(self) -> np.ndarray:
        return np.minimum(self.stop_lengths + 1, self.length)

    def as_source(self) -> tuple[Tensor, np.ndarray]:
        """Bos-framed soft source ``(B, 1 + L, V)`` and its validity mask."""
        B, L, V = self.dists.shape
        bos = np.zeros((B, 1, V))
        bos[:, 0, BOS] = 1.0
        src = T.concat([Tensor(bos), self.dists], axis=1)
        mask = np.arange(L + 1)[None, :] <= self.lengths()[:, None]
        return src, mask

    def argmax_ids(self) -> list[list[int]]:
        """Hard reading of each row: bos + argmax tokens up to the stop row."""
        am = self.dists.data.argmax(-1)
        return [[BOS] + am[b, :n].tolist() for b, n in enumerate(self.lengths())]


def generate_soft(model: TransformerModel, src, src_mask: np.ndarray | None = None,
                  soft_max_len: int = 32, min_len: int = 0) -> SoftSequence:
    """Free-running soft decoding.

    Step j feeds the expected embeddings of the distributions from steps
    ``< j`` (bos one-hot first) back into the decoder and records the softmax
    at the newest position. argmax is only consulted to decide when every
    row has emitted eos, never on the gradient path. ``min_len`` forces at
    least that many steps (used when the rows must line up with a target).
    """
    if soft_max_len < 1:
        raise ValueError("soft_max_len must be >= 1")
    memory = model.encode(src, src_mask)
    if src_mask is None:
        src_mask = np.asarray(src) != PAD if not isinstance(src, Tensor) else np.ones(src.shape[:2], bool)
    B = memory.shape[0]
    V = model.cfg.tgt_vocab
    bos = np.zeros((B, 1, V))
    bos[:, 0, BOS] = 1.0
    banned = np.zeros(V)
    banned[list(NEVER_EMIT)] = NEG_INF
    inputs: list[Tensor] = [Tensor(bos)]
    dists: list[Tensor] = []
    stop = np.full(B, -1)
    # the bos-framed soft source must still fit the next model
    limit = min(soft_max_len, model.cfg.max_len - 1)
    for j in range(limit):
        dec_in = inputs[0] if len(inputs) == 1 else T.concat(inputs, axis=1)
        logits = model.decode(dec_in, memory, src_mask, np.ones((B, j + 1), dtype=bool))
        p = T.softmax(logits[:, j:j + 1, :] + banned, axis=-1)
        dists.append(p)
        fresh = (p.data[:, 0].argmax(-1) == EOS) & (stop < 0)
        stop[fresh] = j
        if (stop >= 0).all() and j + 1 >= min_len:
            break
        inputs.append(p)
    L = len(dists)
    stop[stop < 0] = L
    return SoftSequence(T.concat(dists, axis=1) if L > 1 else dists[0], stop)


def add_noise(seq: SoftSequence, sigma: float, rng: np.random.Generator | int | None = None,
              eps: float = 1e-9) -> SoftSequence:
    """Gaussian noise on the log-probabilities, renormalised with softmax."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return seq
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    noise = rng.normal(0.0, sigma, size=seq.dists.shape)
    noisy = T.softmax(T.log(seq.dists + eps) + noise, axis=-1)
    return SoftSequence(noisy, seq.stop_lengths.copy())


def soft_nll(dists: Tensor, targets: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean ``-log p_j[target_j]`` over aligned, non-pad positions.

    ``targets`` is ``(B, T)`` without bos; positions beyond the generated
    length are dropped.
    """
    B, L, _ = dists.shape
    n = min(L, targets.shape[1])
    tgt = targets[:, :n]
    b, j = np.nonzero(tgt != PAD)
    if b.size == 0:
        raise ValueError("soft_nll: no supervised positions")
    picked = dists[b, j, tgt[b, j]]
    return -(T.log(picked + eps).mean())


@dataclass
class BackTransConfig:
    mode: str = "ctc"
    alpha: float = 0.1
    alpha_text: float | None = None
    noise_sigma: float = 0.05
    soft_max_len: int = 32
    clip_norm: float | None = 5.0
    freeze: tuple[str, ...] = ()

    def __post_init__(self):
        self.mode = self.mode.lower().replace("_", "-")
        if self.mode not in MODES:
            raise ValueError(f"unknown back-translation mode {self.mode!r}")
        if self.alpha < 0 or (self.alpha_text is not None and self.alpha_text < 0):
            raise ValueError("alpha must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.soft_max_len < 1:
            raise ValueError("soft_max_len must be positive")
        self.freeze = tuple(self.freeze)
        if set(self.freeze) - {"F", "G"}:
            raise ValueError("freeze may only name 'F' and/or 'G'")

    @property
    def text_alpha(self) -> float:
        return self.alpha if self.alpha_text is None else self.alpha_text


class DualModel:
    """``F`` translates text to code, ``G`` code to text."""

    def __init__(self, F: TransformerModel, G: TransformerModel):
        if F.cfg.src_vocab != G.cfg.tgt_vocab or F.cfg.tgt_vocab != G.cfg.src_vocab:
            raise ValueError("F and G vocabularies must mirror each other")
        self.F = F
        self.G = G

    def named_parameters(self, exclude: tuple[str, ...] = ()) -> dict[str, Tensor]:
        out = {}
        for tag, m in (("F", self.F), ("G", self.G)):
            if tag in exclude:
                continue
            out.update({f"{tag}.{k}": v for k, v in m.params.items()})
        return out

    def train(self) -> DualModel:
        self.F.train()
        self.G.train()
        return self

    def eval(self) -> DualModel:
        self.F.eval()
        self.G.eval()
        return self


@dataclass
class LossReport:
    mode: str
    components: dict[str, float]
    total: float
    grad_norms: dict[str, float] = field(default_factory=dict)
    lr: float = 0.0


def reconstruction_loss(first: TransformerModel, second: TransformerModel,
                        seq: np.ndarray, soft_max_len: int, noise_sigma: float = 0.0,
                        rng: np.random.Generator | None = None,
                        min_len: int = 0) -> tuple[Tensor, SoftSequence]:
    """``seq -> first -> soft -> second -> seq`` cross-entropy.

    ``second``'s decoder is teacher-forced on ``seq`` while its encoder reads
    the soft intermediate.
    """
    soft = generate_soft(first, seq, seq != PAD, soft_max_len, min_len)
    inter = add_noise(soft, noise_sigma, rng) if noise_sigma > 0 else soft
    x, mask = inter.as_source()
    return second.forward_nll(x, seq, src_mask=mask), soft


def _finish(dual: DualModel, parts: dict[str, Tensor], weights: dict[str, float],
            cfg: BackTransConfig, opt: Adam, lr: float) -> LossReport:
    total = None
    for name, loss in parts.items():
        term = loss * weights[name]
        total = term if total is None else total + term
    total.backward()
    norms = {}
    for tag in ("F", "G"):
        sq = sum(float((p.grad ** 2).sum()) for k, p in opt.params.items()
                 if k.startswith(tag + ".") and p.grad is not None)
        norms[tag] = float(np.sqrt(sq))
    for tag in cfg.freeze:
        for k, p in opt.params.items():
            if k.startswith(tag + "."):
                p.grad = None
    clip_grad_norm(opt.params, cfg.clip_norm)
    opt.step(lr)
    dual.F.zero_grad()
    dual.G.zero_grad()
    return LossReport(cfg.mode, {k: v.item() for k, v in parts.items()}, total.item(),
                      norms, lr)


def ctc_step(dual: DualModel, mined: Batch, annotated: Batch, cfg: BackTransConfig,
             opt: Adam, lr: float, rng: np.random.Generator | None = None) -> LossReport:
    """Code -> G -> soft text -> F -> code on mined snippets, plus supervised F."""
    if cfg.mode not in ("ctc", "ctc-noise"):
        raise ValueError(f"ctc_step needs mode ctc or ctc-noise, got {cfg.mode}")
    if len(mined) == 0:
        raise ValueError("empty mined batch")
    dual.train()
    sigma = cfg.noise_sigma if cfg.mode == "ctc-noise" else 0.0
    rec, _ = reconstruction_loss(dual.G, dual.F, mined.tgt, cfg.soft_max_len, sigma, rng)
    sup = dual.F.forward_nll(annotated.src, annotated.tgt)
    return _finish(dual, {"sup": sup, "rec": rec}, {"sup": 1.0, "rec": cfg.alpha},
                   cfg, opt, lr)


def tct_step(dual: DualModel, text: Batch, annotated: Batch, cfg: BackTransConfig,
             opt: Adam, lr: float, rng: np.random.Generator | None = None) -> LossReport:
    """Text -> F -> soft code -> G -> text, plus supervised G (code -> text)."""
    if cfg.mode != "tct":
        raise ValueError(f"tct_step needs mode tct, got {cfg.mode}")
    if len(text) == 0:
        raise ValueError("empty text batch")
    dual.train()
    rec, _ = reconstruction_loss(dual.F, dual.G, text.src, cfg.soft_max_len)
    sup = dual.G.forward_nll(annotated.tgt, annotated.src)
    return _finish(dual, {"sup": sup, "rec": rec}, {"sup": 1.0, "rec": cfg.alpha},
                   cfg, opt, lr)


def cycle_step(dual: DualModel, text: Batch, code: Batch, annotated: Batch | None,
               cfg: BackTransConfig, opt: Adam, lr: float) -> LossReport:
    """Both reconstruction cycles plus supervision of each soft intermediate.

    Every row is paired, so the intermediate of ``code -> G`` is scored against
    the paired intent and the intermediate of ``text -> F`` against the paired
    snippet. When ``annotated`` is given, teacher-forced F and G losses on it
    are added to ``sup_code`` and ``sup_text``.
    """
    if cfg.mode != "cycle":
        raise ValueError(f"cycle_step needs mode cycle, got {cfg.mode}")
    if len(text) == 0 or len(code) == 0:
        raise ValueError("empty batch")
    dual.train()
    rec_code, soft_text = reconstruction_loss(
        dual.G, dual.F, code.tgt, cfg.soft_max_len, min_len=code.src.shape[1] - 1)
    rec_text, soft_code = reconstruction_loss(
        dual.F, dual.G, text.src, cfg.soft_max_len, min_len=text.tgt.shape[1] - 1)
    sup_text = soft_nll(soft_text.dists, code.src[:, 1:])
    sup_code = soft_nll(soft_code.dists, text.tgt[:, 1:])
    if annotated is not None:
        sup_code = sup_code + dual.F.forward_nll(annotated.src, annotated.tgt)
        sup_text = sup_text + dual.G.forward_nll(annotated.tgt, annotated.src)
    parts = {"rec_code": rec_code, "rec_text": rec_text,
             "sup_code": sup_code, "sup_text": sup_text}
    weights = {"rec_code": cfg.alpha, "rec_text": cfg.text_alpha,
               "sup_code": 1.0, "sup_text": 1.0}
    return _finish(dual, parts, weights, cfg, opt, lr)


def hard_round_trip(first: TransformerModel, second: TransformerModel,
                    seqs: list[list[int]], beam: int = 1) -> list[list[int]]:
    """Decode each framed sequence with ``first`` then ``second`` (argmax tokens)."""
    first.eval()
    second.eval()
    out = []
    for s in seqs:
        mid = beam_search(first, s, beam)
        out.append(beam_search(second, [BOS] + mid + [EOS], beam))
    return out


def round_trip_accuracy(first: TransformerModel, second: TransformerModel,
                        seqs: list[list[int]], beam: int = 1) -> tuple[float, float]:
    """Accuracy of ``second(first(s))`` against ``s`` with framing stripped.

    Returns (clipped unigram token accuracy, position-wise accuracy); the
    second divides exact positional matches by the longer of the two lengths.
    """
    back = hard_round_trip(first, second, seqs, beam)
    refs = [[t for t in s if t not in (BOS, EOS, PAD)] for s in seqs]
    hit = sum(sum(a == b for a, b in zip(r, h)) for r, h in zip(refs, back))
    total = sum(max(len(r), len(h)) for r, h in zip(refs, back))
    return token_accuracy(refs, back), hit / max(total, 1)
