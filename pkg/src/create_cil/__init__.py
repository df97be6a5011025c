"""Class-incremental learning with per-class auto-encoder classifiers."""

__version__ = "0.1.0"
