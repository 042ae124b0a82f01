"""Continual-learning evaluation with the Dual-transfer Matching Index."""

__version__ = "0.1.0"
