"""Region-aware highway driving policies with local road information."""

__version__ = "0.1.0"
