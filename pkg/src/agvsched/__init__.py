"""Seedable simulator of multi-AGV scheduling on a grid factory."""

__version__ = "0.1.0"
