"""Robotic gamma-probe localisation: response model, scanning, and learned control."""

__version__ = "0.1.0"
