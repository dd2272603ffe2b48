"""Retrieval-localized in-context classification for tabular data."""

__version__ = "0.1.0"
