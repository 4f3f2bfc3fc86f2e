"""Finite-model laboratory for vector-valued martingale moment inequalities."""

__version__ = "0.1.0"
