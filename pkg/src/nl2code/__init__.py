"""Transformer translation from natural-language intents to Python snippets,
with mined-data regimes and differentiable back-translation."""

__version__ = "0.1.0"
