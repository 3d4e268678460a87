"""Supervised-contrastive sentence embeddings trained on NLI pairs."""

__version__ = "0.1.0"
