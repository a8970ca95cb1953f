"""Training runs: tokenizer training, supervised regimes, back-translation.

Every source of randomness is addressed by (seed, step), so a run resumed from
a step-k checkpoint replays exactly the batches, dropout masks and noise the
uninterrupted run would have used from step k+1 on.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backtranslation import DualModel, LossReport, ctc_step, cycle_step, tct_step
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .config import ConfigError, RunConfig
from .data import (Batch, Corpus, RegimeBatchSource, SampleStream, Vocabs, effective_intent,
                   encode_corpus, load_annotated, load_mined)
from .decode_eval import EvalReport, beam_search, evaluate
from .optim import Adam, LrSchedule, clip_grad_norm
from .tokenizer import Vocab, train_vocab
from .transformer import TransformerModel

log = logging.getLogger(__name__)

VOCAB_FILES = {"intent": ("intent.vocab", "intent.merges"),
               "snippet": ("snippet.vocab", "snippet.merges")}


def _need_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} path configured")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def load_corpora(cfg: RunConfig, need_mined: bool = False) -> tuple[Corpus, Corpus | None]:
    ann = load_annotated(_need_file(cfg.paths.annotated, "annotated corpus"))
    mined = None
    if cfg.paths.mined is not None or need_mined:
        seed = cfg.seeds.data if cfg.regime.shuffle_mined else None
        mined = load_mined(_need_file(cfg.paths.mined, "mined corpus"),
                           cfg.regime.mined_limit, seed)
    return ann, mined


# -- tokenizers ---------------------------------------------------------------

def train_tokenizers(cfg: RunConfig) -> dict[str, tuple[Path, Path]]:
    """Train and write the intent and snippet vocabularies."""
    ann, mined = load_corpora(cfg)
    examples = list(ann) + (list(mined) if mined is not None else [])
    out = Path(cfg.paths.vocab_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for side, size, texts in (
            ("intent", cfg.model.src_vocab, [effective_intent(e) for e in examples]),
            ("snippet", cfg.model.tgt_vocab, [e.snippet for e in examples])):
        vocab = train_vocab(texts, size)
        vp, mp = (out / f for f in VOCAB_FILES[side])
        vocab.save(vp, mp)
        written[side] = (vp, mp)
        log.info("%s vocabulary: %d pieces, %d merges", side, len(vocab), len(vocab.merges))
    return written


def load_vocabs(cfg: RunConfig) -> Vocabs:
    d = Path(cfg.paths.vocab_dir)
    loaded = {}
    for side, (v, m) in VOCAB_FILES.items():
        vp, mp = d / v, d / m
        if not vp.is_file() or not mp.is_file():
            raise ConfigError(f"vocabulary files missing in {d} (run tokenizer-train first)")
        loaded[side] = Vocab.load(vp, mp)
    vocabs = Vocabs(loaded["intent"], loaded["snippet"])
    if len(vocabs.intent) != cfg.model.src_vocab or len(vocabs.snippet) != cfg.model.tgt_vocab:
        raise ConfigError(
            f"vocab sizes {len(vocabs.intent)}/{len(vocabs.snippet)} do not match model "
            f"src_vocab/tgt_vocab {cfg.model.src_vocab}/{cfg.model.tgt_vocab}")
    return vocabs


# -- models -------------------------------------------------------------------

def build_models(cfg: RunConfig) -> tuple[TransformerModel, TransformerModel | None]:
    """The text -> code model F, plus the code -> text model G when back-translating."""
    F = TransformerModel(cfg.model, seed=cfg.seeds.init)
    if cfg.backtrans is None:
        return F, None
    m = cfg.model
    gcfg = type(m)(**{**m.to_dict(), "src_vocab": m.tgt_vocab, "tgt_vocab": m.src_vocab})
    return F, TransformerModel(gcfg, seed=cfg.seeds.init + 1)


def named_params(F: TransformerModel, G: TransformerModel | None) -> dict:
    if G is None:
        return {f"F.{k}": v for k, v in F.params.items()}
    return DualModel(F, G).named_parameters()


def load_model(checkpoint) -> tuple[TransformerModel, RunConfig]:
    """Text -> code model and run config stored in a checkpoint (eval mode)."""
    ck = load_checkpoint(checkpoint)
    cfg = RunConfig.from_dict(ck.config)
    F, G = build_models(cfg)
    restore_params(named_params(F, G), ck.params)
    F.eval()
    return F, cfg


# -- metrics ------------------------------------------------------------------

class MetricsLog:
    """Append-only JSON-lines log, one file per run id."""

    def __init__(self, path, resume_step: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        keep = []
        if resume_step is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip() and json.loads(line)["step"] <= resume_step:
                    keep.append(line + "\n")
        self.path.write_text("".join(keep), encoding="utf-8")
        self.last_step = resume_step or 0

    def append(self, record: dict) -> None:
        if record["step"] <= self.last_step:
            raise ValueError(f"metrics step {record['step']} after {self.last_step}")
        self.last_step = record["step"]
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines()
            if ln.strip()]


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    final_step: int
    checkpoint: Path
    metrics: Path
    last: dict


def _half(B: int) -> tuple[int, int]:
    na = (B + 1) // 2
    return na, max(B - na, 1)


def _validate(cfg: RunConfig) -> None:
    if cfg.backtrans is not None and cfg.paths.mined is None:
        raise ConfigError(f"back-translation mode {cfg.backtrans.mode} needs a mined corpus path")
    if cfg.backtrans is None and cfg.regime.kind != "mix" and cfg.paths.mined is None:
        raise ConfigError(f"the {cfg.regime.kind} regime needs a mined corpus path")


def train(cfg: RunConfig, resume=None) -> TrainResult:
    """Run ``cfg`` to ``max_steps``; ``resume`` is a checkpoint directory."""
    _validate(cfg)
    vocabs = load_vocabs(cfg)
    ann, mined = load_corpora(cfg, need_mined=cfg.backtrans is not None)
    test = load_annotated(_need_file(cfg.paths.test, "test corpus"), "test") \
        if cfg.paths.test else None
    L = cfg.model.max_len
    ann_rows, _ = encode_corpus(ann, vocabs, L)
    mined_rows = encode_corpus(mined, vocabs, L)[0] if mined is not None else []
    if not ann_rows:
        raise ConfigError("annotated corpus is empty")

    F, G = build_models(cfg)
    params = named_params(F, G)
    o = cfg.optimizer
    opt = Adam(params, (o.beta1, o.beta2), o.eps)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.config["model"] != cfg.to_dict()["model"]:
            raise ConfigError("checkpoint model config differs from the run config")
        restore_params(params, ck.params)
        opt.state = ck.adam
        start = ck.step
    sched = LrSchedule.with_peak(cfg.model.d_model, o.warmup_steps, o.lr)

    run_dir = Path(cfg.paths.metrics) / cfg.run_id
    metrics = MetricsLog(run_dir / "metrics.jsonl", start if resume is not None else None)
    ck_dir = Path(cfg.paths.checkpoints) / cfg.run_id
    cfg_dict = cfg.to_dict()

    if cfg.backtrans is None:
        source = RegimeBatchSource(cfg.regime, ann_rows, mined_rows, cfg.batch_size,
                                   cfg.seeds.data)
        step_fn = lambda step, lr: _supervised_step(F, opt, source, step, lr, o.clip_norm)
    else:
        na, nm = _half(cfg.batch_size)
        streams = (SampleStream(ann_rows, cfg.seeds.data, 1),
                   SampleStream(mined_rows, cfg.seeds.data, 2),
                   SampleStream(mined_rows, cfg.seeds.data, 3))
        dual = DualModel(F, G)
        step_fn = lambda step, lr: _backtrans_step(cfg, dual, opt, streams, na, nm, step, lr)

    t0 = time.perf_counter()
    last = {}
    path = ck_dir / f"step-{start:06d}"
    for step in range(start + 1, cfg.max_steps + 1):
        F.rng = np.random.default_rng([cfg.seeds.dropout, 0, step])
        if G is not None:
            G.rng = np.random.default_rng([cfg.seeds.dropout, 1, step])
        lr = sched.rate(step)
        rep = step_fn(step, lr)
        if not np.isfinite(rep.total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        last = {"step": step, "wall_time": round(time.perf_counter() - t0, 4),
                "mode": rep.mode, "loss": rep.components, "total": rep.total, "lr": lr}
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            if test is not None:
                r = evaluate(F, test, vocabs, cfg.beam)
                last["eval"] = {"bleu": r.corpus_bleu, "token_accuracy": r.token_accuracy}
            path = save_checkpoint(ck_dir / f"step-{step:06d}", step, cfg_dict,
                                   {k: v.data for k, v in params.items()}, opt.state)
        metrics.append(last)
    return TrainResult(max(start, cfg.max_steps), path, metrics.path, last)


def _supervised_step(F: TransformerModel, opt: Adam, source: RegimeBatchSource,
                     step: int, lr: float, clip: float | None) -> LossReport:
    batch, weights = source.batch(step)
    F.train()
    loss = F.forward_nll(batch.src, batch.tgt, batch.src_mask, weights)
    loss.backward()
    norm = clip_grad_norm(opt.params, clip)
    opt.step(lr)
    F.zero_grad()
    return LossReport(source.regime.kind, {"nll": loss.item()}, loss.item(), {"F": norm}, lr)


def _backtrans_step(cfg: RunConfig, dual: DualModel, opt: Adam, streams, na: int, nm: int,
                    step: int, lr: float) -> LossReport:
    bt = cfg.backtrans
    ann_s, mined_s, code_s = streams
    annotated = Batch.collate(ann_s.take((step - 1) * na, na))
    mined = Batch.collate(mined_s.take((step - 1) * nm, nm))
    rng = np.random.default_rng([cfg.seeds.noise, step])
    if bt.mode in ("ctc", "ctc-noise"):
        return ctc_step(dual, mined, annotated, bt, opt, lr, rng)
    if bt.mode == "tct":
        return tct_step(dual, mined, annotated, bt, opt, lr, rng)
    code = Batch.collate(code_s.take((step - 1) * nm, nm))
    return cycle_step(dual, mined, code, annotated, bt, opt, lr)


def evaluate_checkpoint(checkpoint, test_path, beam: int | None = None) -> EvalReport:
    model, cfg = load_model(checkpoint)
    vocabs = load_vocabs(cfg)
    test = load_annotated(_need_file(test_path, "test corpus"), "test")
    return evaluate(model, test, vocabs, beam or cfg.beam)


def translate(checkpoint, intent: str, beam: int | None = None) -> str:
    model, cfg = load_model(checkpoint)
    vocabs = load_vocabs(cfg)
    src = vocabs.intent.encode(intent, add_bos_eos=True)
    L = cfg.model.max_len
    if len(src) > L:
        src = src[:L - 1] + src[-1:]
    return vocabs.snippet.decode(beam_search(model, src, beam or cfg.beam))
