"""Recommendation instruction corpora and reranking evaluation."""

__version__ = "0.1.0"
