"""Federated traffic digital twin simulator: edge semantic twins, cloud sync, signal control."""

__version__ = "0.1.0"
