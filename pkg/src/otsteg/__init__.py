"""Desk-scale optimal-transport image steganography lab."""

__version__ = "0.1.0"
