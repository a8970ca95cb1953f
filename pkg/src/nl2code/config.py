"""Run configuration: one JSON document holding every knob of a run.

Defaults are the reported training setup (1 layer, 8 heads, Adam at 0.001,
batch 32, vocabularies of 4000, dropout 0.2, beam 2). ``warmup_steps`` is
scaled down to 400 for small runs. Paths are taken relative to the current
working directory.

Schema (all keys optional, missing keys take their default)::

    {
      "model":     {num_layers, num_heads, d_model, d_ff, dropout,
                    src_vocab, tgt_vocab, max_len},
      "regime":    {kind, alpha, pretrain_steps, mined_limit, shuffle_mined},
      "backtrans": null | {mode, alpha, alpha_text, noise_sigma,
                           soft_max_len, clip_norm, freeze},
      "optimizer": {lr, beta1, beta2, eps, warmup_steps, clip_norm},
      "batch_size", "max_steps", "eval_every", "beam", "run_id",
      "seeds":     {data, init, dropout, noise},
      "paths":     {annotated, mined, test, vocab_dir, checkpoints, metrics}
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backtranslation import BackTransConfig
from .data import RegimeConfig
from .transformer import TransformerConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 400
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be positive")


@dataclass
class Seeds:
    data: int = 0
    init: int = 0
    dropout: int = 0
    noise: int = 0


@dataclass
class Paths:
    annotated: str | None = None
    mined: str | None = None
    test: str | None = None
    vocab_dir: str = "vocab"
    checkpoints: str = "checkpoints"
    metrics: str = "runs"


@dataclass
class RunConfig:
    model: TransformerConfig = field(default_factory=TransformerConfig)
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    backtrans: BackTransConfig | None = None
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 32
    max_steps: int = 2000
    eval_every: int = 500
    beam: int = 2
    run_id: str = "run"
    seeds: Seeds = field(default_factory=Seeds)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 1 or self.eval_every < 1:
            raise ValueError("batch_size, max_steps and eval_every must be positive")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if not self.run_id or "/" in self.run_id:
            raise ValueError(f"bad run_id {self.run_id!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        try:
            return _build(cls, d, "config")
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_json(path.read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


_NESTED = {
    "model": TransformerConfig, "regime": RegimeConfig, "backtrans": BackTransConfig,
    "optimizer": OptimConfig, "seeds": Seeds, "paths": Paths,
}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    kw = {}
    for k, v in d.items():
        sub = _NESTED.get(k) if cls is RunConfig else None
        if sub is not None and v is not None:
            v = _build(sub, v, f"{where}.{k}")
        elif k == "freeze" and isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def apply_overrides(cfg: RunConfig, *, seed: int | None = None, mined_limit: int | None = None,
                    regime: str | None = None, mode: str | None = None,
                    alpha: float | None = None, beam: int | None = None) -> RunConfig:
    """Command-line values win over file values; returns a new validated config.

    ``--alpha`` sets the back-translation weight when a mode is active and the
    mined-loss weight of the Sample regime otherwise.
    """
    d = cfg.to_dict()
    if seed is not None:
        d["seeds"] = {k: seed for k in d["seeds"]}
    if mined_limit is not None:
        d["regime"]["mined_limit"] = mined_limit
    if regime is not None:
        d["regime"]["kind"] = regime
    if mode is not None:
        d["backtrans"] = d["backtrans"] or {}
        d["backtrans"]["mode"] = mode
    if alpha is not None:
        if d["backtrans"] is not None:
            d["backtrans"]["alpha"] = alpha
        else:
            d["regime"]["alpha"] = alpha
    if beam is not None:
        d["beam"] = beam
    return RunConfig.from_dict(d)
