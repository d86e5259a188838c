"""Semantic-guided contrastive low-light enhancement: trainer and evaluation toolkit."""

__version__ = "0.1.0"
