"""Sparse ODE discovery shared across multiple environments."""

__version__ = "0.1.0"
