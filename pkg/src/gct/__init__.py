"""Guided collaborative training for pixel-wise semi-supervised learning."""

__version__ = "0.1.0"
