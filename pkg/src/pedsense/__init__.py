"""Acoustic pedestrian detection and short-term flow prediction toolkit."""

__version__ = "0.1.0"
