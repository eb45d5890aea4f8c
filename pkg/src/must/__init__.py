"""Multimodal survival prediction with algebraic decomposition and latent diffusion."""

__version__ = "0.1.0"
