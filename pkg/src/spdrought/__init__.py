"""Spatiotemporal multi-task drought-index forecasting toolkit."""

__version__ = "0.1.0"
