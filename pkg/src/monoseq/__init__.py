"""Monotonic-alignment attention for robust sequence-to-sequence modeling."""

__version__ = "0.1.0"
