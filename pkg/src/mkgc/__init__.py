"""Generative multilingual knowledge graph completion with knowledge constraints."""

__version__ = "0.1.0"
