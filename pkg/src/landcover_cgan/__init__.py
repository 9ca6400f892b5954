"""Conditional-adversarial and supervised U-Net training for 4-band land-cover tiles."""

__version__ = "0.1.0"
