"""Patch-based smoke flow synthesis with learned flow descriptors."""

__version__ = "0.1.0"
