"""Adversarial-example purification and detection for automatic speaker verification."""

__version__ = "0.1.0"
