"""Globally-aware multiple instance classifier, desk scale."""

__version__ = "0.1.0"
