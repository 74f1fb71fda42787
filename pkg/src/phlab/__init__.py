"""Numerical laboratory for fibred partially hyperbolic skew products."""

__version__ = "0.1.0"
