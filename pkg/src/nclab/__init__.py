"""Numerical laboratory for local limit theorems of nonconventional sums."""
__version__ = "0.1.0"
