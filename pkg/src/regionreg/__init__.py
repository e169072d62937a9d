"""Unsupervised region-aware point-cloud registration."""

__version__ = "0.1.0"
