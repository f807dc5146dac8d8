"""Diffusion attribution scores for miniature DDPMs."""

__version__ = "0.1.0"
