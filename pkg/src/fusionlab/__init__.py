"""Desk-scale laboratory for dynamic-prompt backdoors on a micro vision transformer."""

__version__ = "0.1.0"
