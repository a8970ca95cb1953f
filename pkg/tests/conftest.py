"""Shared helpers: a finite-difference gradient oracle and small model builders."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from nl2code.transformer import TransformerConfig, TransformerModel

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "nl2code" / "fixtures"
ANNOTATED_MINI = FIXTURES / "annotated_mini.json"
MINED_MINI = FIXTURES / "mined_mini.jsonl"

H = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest per-entry ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max(initial=0.0))


def tiny_config(**kw) -> TransformerConfig:
    base = dict(num_layers=1, num_heads=2, d_model=8, d_ff=16, dropout=0.0,
                src_vocab=9, tgt_vocab=7, max_len=12)
    base.update(kw)
    return TransformerConfig(**base)


def tiny_model(seed: int = 0, **kw) -> TransformerModel:
    return TransformerModel(tiny_config(**kw), seed=seed).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sampled_grad_error(f, tensor, k: int, rng, h: float = H) -> float:
    """Max relative error between ``tensor.grad`` and central differences at ``k`` random entries."""
    flat = tensor.data.reshape(-1)
    grad = (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)).reshape(-1)
    picks = rng.choice(flat.size, size=min(k, flat.size), replace=False)
    worst = 0.0
    for i in picks:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        worst = max(worst, max_rel_error(grad[i], (fp - fm) / (2 * h)))
    return worst


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (name, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})")
