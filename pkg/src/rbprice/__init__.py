"""Certified reduced-basis pricing of European and American options."""

__version__ = "0.1.0"
