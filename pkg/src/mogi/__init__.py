"""Multivariate overnight GARCH-Ito volatility toolkit."""

__version__ = "0.1.0"
