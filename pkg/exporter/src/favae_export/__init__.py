"""Backbone weight-pack exporter (FVW1 format)."""

__version__ = "0.1.0"
