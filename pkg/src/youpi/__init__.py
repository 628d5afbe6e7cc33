"""youpi: web-based astronomical image processing pipeline."""

__version__ = "0.1.0"
