"""Wassprox - nonsmooth analysis and proximal aiming on particle measures."""

__version__ = "0.1.0"
