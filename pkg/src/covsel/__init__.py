"""Coverage-directed and novelty-driven test selection."""

__version__ = "0.1.0"
