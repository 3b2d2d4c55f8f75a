"""Desk-scale laboratory for long-tailed, fine-grained classification."""

__version__ = "0.1.0"
