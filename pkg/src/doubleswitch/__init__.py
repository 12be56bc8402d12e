"""Verification and continuation of bang-bang minimum-time extremals with a double switch."""

__version__ = "0.1.0"
