"""Multimodal fusion experimentation on synthetic data."""

__version__ = "0.1.0"
