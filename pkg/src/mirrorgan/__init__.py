"""Desk-scale text-to-image-to-text GAN with a procedural scene corpus and an exact semantic oracle."""

__version__ = "0.1.0"
