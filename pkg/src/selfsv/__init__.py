"""Self-supervised speaker verification backend at desk scale."""

__version__ = "0.1.0"
