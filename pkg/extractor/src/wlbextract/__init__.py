"""Offline feature-bundle extractor for word-level intelligibility prediction."""

__version__ = "0.1.0"
