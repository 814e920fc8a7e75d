"""Hash-selected sparse training for fully-connected networks on CPU."""

__version__ = "0.1.0"
