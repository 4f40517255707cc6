"""Probabilistic relative-position cursors for length-extrapolating transformers."""

__version__ = "0.1.0"
