"""Embedding-based retrieval: dual-encoder training, offline recall, filtered kNN serving."""

__version__ = "0.1.0"
