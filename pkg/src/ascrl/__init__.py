"""Application-specific congestion control with a central soft actor-critic server."""

__version__ = "0.1.0"
