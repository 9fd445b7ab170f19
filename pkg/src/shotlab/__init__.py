"""Few-shot learning with and without base-class labels, at desk scale."""

__version__ = "0.1.0"
