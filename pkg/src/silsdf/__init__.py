"""Signed distance fields of single objects from posed images and silhouettes."""

__version__ = "0.1.0"
