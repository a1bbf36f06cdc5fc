"""Ternary weight quantization: naive, TQuant and MQuant operators."""

__version__ = "0.1.0"
