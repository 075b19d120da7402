"""Facial affect synthesis with 3D morphable models."""
__version__ = "0.1.0"
