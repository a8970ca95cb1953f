"""Post-norm transformer encoder-decoder on top of :mod:`nl2code.tensor`.

Sources and decoder inputs may be hard token ids ``(B, T)`` or soft
distributions ``(B, T, V)``; the latter are embedded as the probability-weighted
mixture of embedding rows, which keeps chained models differentiable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import BOS, PAD

NEG_INF = -np.inf
# framing ids that are never a valid next token when generating
NEVER_EMIT = (PAD, BOS)


@dataclass
class TransformerConfig:
    num_layers: int = 1
    num_heads: int = 8
    d_model: int = 128
    d_ff: int = 512
    dropout: float = 0.2
    src_vocab: int = 4000
    tgt_vocab: int = 4000
    max_len: int = 128

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError("num_layers must be non-negative")
        if self.num_heads < 1 or self.d_model % self.num_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for name in ("d_ff", "src_vocab", "tgt_vocab", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(cfg: TransformerConfig) -> int:
    """Closed-form number of scalars in a model built from ``cfg``.

    embeddings (src_vocab + tgt_vocab) * d
    + encoder layers: 4 d^2 attention + feed-forward + 2 layer norms
    + decoder layers: 8 d^2 attention + feed-forward + 3 layer norms
    + output projection d * tgt_vocab + tgt_vocab
    with feed-forward = 2 d d_ff + d_ff + d and layer norm = 2 d.
    """
    d, f = cfg.d_model, cfg.d_ff
    ff = 2 * d * f + f + d
    enc = 4 * d * d + ff + 2 * 2 * d
    dec = 8 * d * d + ff + 3 * 2 * d
    return ((cfg.src_vocab + cfg.tgt_vocab) * d + cfg.num_layers * (enc + dec)
            + d * cfg.tgt_vocab + cfg.tgt_vocab)


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ValueError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def attention_bias(q_valid: np.ndarray | None, k_valid: np.ndarray,
                   causal: bool = False) -> np.ndarray:
    """Additive bias ``(B, Tq, Tk)``: 0 where attention is allowed, -inf elsewhere.

    ``k_valid`` is ``(B, Tk)``; ``q_valid`` only sets Tq (rows for padded
    queries still see every valid key, their outputs are ignored downstream).
    """
    B, Tk = k_valid.shape
    Tq = Tk if q_valid is None else q_valid.shape[1]
    allowed = np.broadcast_to(k_valid[:, None, :], (B, Tq, Tk))
    if causal:
        allowed = allowed & np.tril(np.ones((Tq, Tk), dtype=bool))
    if not allowed.any(axis=-1).all():
        raise ValueError("attention mask leaves a query with no attendable key")
    return np.where(allowed, 0.0, NEG_INF)


def multi_head_attention(q_in: Tensor, kv_in: Tensor, Wq: Tensor, Wk: Tensor,
                         Wv: Tensor, Wo: Tensor, bias: np.ndarray | None,
                         heads: int) -> Tensor:
    """Scaled dot-product attention over ``heads`` subspaces.

    ``q_in`` is ``(B, Tq, d)``, ``kv_in`` is ``(B, Tk, d)``, ``bias`` broadcasts
    to ``(B, Tq, Tk)``.
    """
    B, Tq, d = q_in.shape
    Tk = kv_in.shape[1]
    dk = d // heads
    q = (q_in @ Wq).reshape(B, Tq, heads, dk).transpose(0, 2, 1, 3)
    k = (kv_in @ Wk).reshape(B, Tk, heads, dk).transpose(0, 2, 3, 1)
    v = (kv_in @ Wv).reshape(B, Tk, heads, dk).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / math.sqrt(dk))
    if bias is not None:
        scores = scores + bias[:, None, :, :]
    weights = T.softmax(scores, axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
    return out @ Wo


def soft_embed(dist: Tensor, table: Tensor, tol: float = 1e-6) -> Tensor:
    """Expected embedding of each distribution row: ``dist @ table``."""
    dist = T.as_tensor(dist)
    d = dist.data
    if d.shape[-1] != table.shape[0]:
        raise T.ShapeError(
            f"soft_embed: distribution width {d.shape[-1]} vs table {table.shape}")
    if (d < -tol).any() or np.abs(d.sum(axis=-1) - 1.0).max(initial=0.0) > tol:
        raise ValueError("soft_embed: rows must be probability distributions")
    return dist @ table


class TransformerModel:
    def __init__(self, cfg: TransformerConfig, seed: int = 0, dropout_seed: int | None = None):
        self.cfg = cfg
        self.training = True
        self.rng = np.random.default_rng(seed if dropout_seed is None else dropout_seed)
        self.pe = positional_encoding(cfg.max_len, cfg.d_model)
        self.params: dict[str, Tensor] = {}
        init = np.random.default_rng(seed)
        d, f = cfg.d_model, cfg.d_ff
        lim = 1.0 / math.sqrt(d)

        def mat(name, shape):
            self.params[name] = Tensor(init.uniform(-lim, lim, size=shape), requires_grad=True)

        def const(name, shape, value):
            self.params[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

        mat("src_emb", (cfg.src_vocab, d))
        mat("tgt_emb", (cfg.tgt_vocab, d))
        for side, attns, norms in (("enc", ("self_attn",), 2),
                                   ("dec", ("self_attn", "cross_attn"), 3)):
            for i in range(cfg.num_layers):
                pre = f"{side}.{i}"
                for a in attns:
                    for w in ("Wq", "Wk", "Wv", "Wo"):
                        mat(f"{pre}.{a}.{w}", (d, d))
                mat(f"{pre}.ff.W1", (d, f))
                const(f"{pre}.ff.b1", (f,), 0.0)
                mat(f"{pre}.ff.W2", (f, d))
                const(f"{pre}.ff.b2", (d,), 0.0)
                for n in range(1, norms + 1):
                    const(f"{pre}.ln{n}.gamma", (d,), 1.0)
                    const(f"{pre}.ln{n}.beta", (d,), 0.0)
        mat("out.W", (d, cfg.tgt_vocab))
        const("out.b", (cfg.tgt_vocab,), 0.0)

    # -- modes -------------------------------------------------------------
    def train(self) -> TransformerModel:
        self.training = True
        return self

    def eval(self) -> TransformerModel:
        self.training = False
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- building blocks ---------------------------------------------------
    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.cfg.dropout, self.rng, self.training)

    def _norm(self, x: Tensor, pre: str) -> Tensor:
        return T.layer_norm(x, self.params[pre + ".gamma"], self.params[pre + ".beta"])

    def _attn(self, pre: str, q_in: Tensor, kv_in: Tensor, bias) -> Tensor:
        p = self.params
        return multi_head_attention(q_in, kv_in, p[pre + ".Wq"], p[pre + ".Wk"],
                                    p[pre + ".Wv"], p[pre + ".Wo"], bias,
                                    self.cfg.num_heads)

    def _ff(self, pre: str, x: Tensor) -> Tensor:
        p = self.params
        h = T.relu(x @ p[pre + ".W1"] + p[pre + ".b1"])
        return h @ p[pre + ".W2"] + p[pre + ".b2"]

    def _embed(self, seq, table: Tensor) -> Tensor:
        if isinstance(seq, Tensor):
            x = soft_embed(seq, table)
        else:
            x = T.embedding(table, seq)
        L = x.shape[1]
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        x = x * math.sqrt(self.cfg.d_model) + self.pe[:L]
        return self._drop(x)

    # -- public forward pieces ---------------------------------------------
    def encode(self, src, src_mask: np.ndarray | None = None) -> Tensor:
        """Memory ``(B, Ts, d)`` for ids ``(B, Ts)`` or distributions ``(B, Ts, V)``."""
        src, src_mask = _prepare(src, src_mask)
        x = self._embed(src, self.params["src_emb"])
        bias = attention_bias(None, src_mask)
        for i in range(self.cfg.num_layers):
            pre = f"enc.{i}"
            x = self._norm(x + self._drop(self._attn(pre + ".self_attn", x, x, bias)), pre + ".ln1")
            x = self._norm(x + self._drop(self._ff(pre + ".ff", x)), pre + ".ln2")
        return x

    def decode(self, tgt_in, memory: Tensor, src_mask: np.ndarray,
               tgt_mask: np.ndarray | None = None) -> Tensor:
        """Teacher-forced logits ``(B, Tt, tgt_vocab)``; row j sees tgt_in[:j+1] only."""
        tgt_in, tgt_mask = _prepare(tgt_in, tgt_mask)
        if memory.shape[-1] != self.cfg.d_model:
            raise T.ShapeError(
                f"memory width {memory.shape[-1]} != d_model {self.cfg.d_model}")
        x = self._embed(tgt_in, self.params["tgt_emb"])
        self_bias = attention_bias(tgt_mask, tgt_mask, causal=True)
        cross_bias = attention_bias(tgt_mask, src_mask)
        for i in range(self.cfg.num_layers):
            pre = f"dec.{i}"
            x = self._norm(x + self._drop(self._attn(pre + ".self_attn", x, x, self_bias)), pre + ".ln1")
            x = self._norm(x + self._drop(self._attn(pre + ".cross_attn", x, memory, cross_bias)), pre + ".ln2")
            x = self._norm(x + self._drop(self._ff(pre + ".ff", x)), pre + ".ln3")
        return x @ self.params["out.W"] + self.params["out.b"]

    def forward_nll(self, src, tgt: np.ndarray, src_mask: np.ndarray | None = None,
                    weights: np.ndarray | None = None) -> Tensor:
        """Cross-entropy of predicting ``tgt[:, 1:]`` from ``tgt[:, :-1]``."""
        tgt = np.atleast_2d(np.asarray(tgt, dtype=np.int64))
        memory = self.encode(src, src_mask)
        src_mask = _prepare(src, src_mask)[1]
        logits = self.decode(tgt[:, :-1], memory, src_mask)
        return T.cross_entropy(logits, tgt[:, 1:], pad_id=PAD, weights=weights)

    def next_log_probs(self, memory: Tensor, src_mask: np.ndarray,
                       prefixes: np.ndarray) -> np.ndarray:
        """Log-probabilities ``(N, V)`` of the token following each prefix row.

        ``memory``/``src_mask`` have batch 1 or N.
        """
        prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
        N = prefixes.shape[0]
        if memory.shape[0] != N:
            memory = Tensor(np.repeat(memory.data, N, axis=0))
            src_mask = np.repeat(src_mask, N, axis=0)
        with T.no_grad():
            logits = self.decode(prefixes, memory, src_mask,
                                 np.ones(prefixes.shape, dtype=bool)).data[:, -1]
        logits[:, NEVER_EMIT] = NEG_INF
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _prepare(seq, mask):
    """Add a batch axis to unbatched input and derive the validity mask."""
    if isinstance(seq, Tensor):
        if seq.ndim == 2:
            seq = seq.reshape(1, *seq.shape)
        if mask is None:
            mask = np.ones(seq.shape[:2], dtype=bool)
    else:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.ndim == 1:
            seq = seq[None, :]
        if mask is None:
            mask = seq != PAD
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    return seq, mask
