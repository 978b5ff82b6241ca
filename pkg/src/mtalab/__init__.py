"""Multi-token attention laboratory: attention variants, a toy transformer and its block-search task."""

__version__ = "0.1.0"
