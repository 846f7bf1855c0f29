"""Quadocular long-range stereo depth engine."""

__version__ = "0.1.0"
