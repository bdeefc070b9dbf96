"""MARMamba metal artifact reduction toolkit."""

__version__ = "0.3.0"
