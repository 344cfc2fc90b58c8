"""Adaptive hp sampling of photonic band functions over the Brillouin zone."""

__version__ = "0.1.0"
