"""Multilingual SFT data construction toolkit."""

__version__ = "0.1.0"
