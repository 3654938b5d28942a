"""Score-based graph augmentation with controlled out-of-distribution exploration."""

__version__ = "0.1.0"
