"""Activation-informed model merging toolkit."""

__version__ = "0.1.0"
