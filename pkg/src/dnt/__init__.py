"""Dual-network visual tracker with ICA-R (ICA with reference) heat maps."""

__version__ = "0.1.0"
