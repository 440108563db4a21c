"""Graph-to-frame retrieval-augmented video reasoning engine."""

__version__ = "0.1.0"
