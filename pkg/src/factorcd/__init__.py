"""Factored context-dependent acoustic modeling on synthetic speech-like data."""

__version__ = "0.1.0"
