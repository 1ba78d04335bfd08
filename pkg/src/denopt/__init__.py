"""Pocket-conditional point-cloud diffusion with denoising policy optimization."""

__version__ = "0.1.0"
