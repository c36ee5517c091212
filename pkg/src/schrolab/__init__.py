"""Numerical laboratory for variable-coefficient Schrödinger equations."""

__version__ = "0.1.0"
