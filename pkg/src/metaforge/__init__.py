"""Few-shot meta-learning engine for protein mutation property regression."""

__version__ = "0.1.0"
