"""Receptor-conditioned molecular diffusion with virtual-receptor compression."""

__version__ = "0.1.0"
