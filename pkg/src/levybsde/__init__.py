"""Numerical lab for BSDEs driven by finite-activity Lévy processes."""

__version__ = "0.1.0"
