"""Multi-master replicated file catalog with partitioned ownership."""

__version__ = "0.1.0"
