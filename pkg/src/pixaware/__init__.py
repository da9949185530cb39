"""Pixel-aware latent diffusion for toy-scale image restoration."""

__version__ = "0.1.0"
