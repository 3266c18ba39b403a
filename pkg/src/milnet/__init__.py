"""Weak-label audio event detection (WHEN) and tagging (WHO) toolkit."""

__version__ = "0.1.0"
