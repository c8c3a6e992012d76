"""Environment-aware adaptive structured pruning for a toy streaming transformer."""

__version__ = "0.1.0"
