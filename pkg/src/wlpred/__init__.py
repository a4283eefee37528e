"""Reference-conditioned word-level speech intelligibility prediction."""

__version__ = "0.1.0"
