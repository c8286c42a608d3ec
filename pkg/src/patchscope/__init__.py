"""Patch-level fake-image detection with receptive-field-limited networks."""

__version__ = "0.1.0"
