"""Multi-feature audio authenticity network: features, model, training and evaluation."""

__version__ = "0.1.0"
