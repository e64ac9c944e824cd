"""Concept regions: localize and score human-readable concepts inside a classifier's feature maps."""

__version__ = "0.1.0"
