"""Disentangled singer / vocal-technique conversion on mel-spectrograms."""

__version__ = "0.1.0"
