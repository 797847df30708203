"""Wildfire-aware public-safety power shutoff planning on small transmission grids."""

__version__ = "0.1.0"
