"""Hidden multi-family household detection from overhead imagery."""

__version__ = "0.1.0"
