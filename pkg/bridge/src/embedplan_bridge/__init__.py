"""Frozen pretrained-encoder embedding extraction to the EMBT file format."""

__version__ = "0.1.0"
