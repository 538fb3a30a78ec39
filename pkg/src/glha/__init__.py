"""Guided loss, hybrid attention cascade and two-view pose tools."""

__version__ = "0.1.0"
