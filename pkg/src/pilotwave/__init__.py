"""Numerical laboratory for de Broglie-Bohm pilot-wave dynamics."""

__version__ = "0.1.0"
