"""Visually grounded speech with continuous integrate-and-fire segmentation."""

__version__ = "0.1.0"
