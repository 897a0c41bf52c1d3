"""Contrast-then-memorize inductive multimodal knowledge graph completion."""

__version__ = "0.1.0"
