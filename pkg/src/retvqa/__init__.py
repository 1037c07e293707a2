"""Retrieval-based visual question answering over synthetic scene graphs."""

__version__ = "0.1.0"
