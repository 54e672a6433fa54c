"""Diagonal state space sequence engine for multiple-instance learning."""

__version__ = "0.1.0"
