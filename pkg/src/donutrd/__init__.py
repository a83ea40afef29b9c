"""Donut regression discontinuity: estimation, bias-aware inference and
specification tests."""

__version__ = "0.1.0"
