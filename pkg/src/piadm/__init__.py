"""Parallel-in-time diffusion sampling with Picard iteration."""

__version__ = "0.1.0"
