"""matchdid - Matching-based difference-in-differences for staggered adoption panels."""

__version__ = "0.1.0"
