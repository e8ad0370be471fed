"""Sweat-pore detection, pore description and pore-based fingerprint
matching built on a small numpy convolutional network engine."""

__version__ = "0.1.0"
