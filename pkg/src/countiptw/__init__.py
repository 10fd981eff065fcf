"""Stabilised inverse-probability weighting for count exposures."""
__version__ = "0.1.0"
