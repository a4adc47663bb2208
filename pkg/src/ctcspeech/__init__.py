"""Encoder-only multi-task CTC speech-to-text at desk scale."""

__version__ = "0.1.0"
