"""Training data attribution scores treated as random variables over a model posterior."""

__version__ = "0.1.0"
