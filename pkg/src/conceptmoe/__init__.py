"""Interpretable image recognition with a concept partition and a gated mixture of experts."""

__version__ = "0.1.0"
