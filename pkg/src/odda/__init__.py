"""On-device domain adaptation for keyword spotting, at desk scale."""

__version__ = "0.1.0"
