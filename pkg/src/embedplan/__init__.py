"""Latent transition learning over text-described classical planning domains."""

__version__ = "0.1.0"
