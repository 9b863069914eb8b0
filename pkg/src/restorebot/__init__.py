"""Landmark mapping and cross-season association for restoration field plots."""

__version__ = "0.1.0"
