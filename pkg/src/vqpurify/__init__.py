"""Poison purification through a vector-quantised autoencoder with an adversarial critic."""

__version__ = "0.1.0"
