"""Desk-scale diffusion representation lab."""

__version__ = "0.1.0"
