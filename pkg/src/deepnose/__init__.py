"""Orientation-averaged 3-D CNN features for odorant molecules."""

__version__ = "0.1.0"
