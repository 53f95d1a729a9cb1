"""Self-attention video summarization: model, training, keyshot selection, evaluation."""

__version__ = "0.1.0"
