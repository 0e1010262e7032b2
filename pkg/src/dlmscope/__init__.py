"""Desk-scale lab for attention-sink analysis in masked diffusion language models."""

__version__ = "0.1.0"
