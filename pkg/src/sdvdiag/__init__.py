"""Diagnosis engine for connected-vehicle cloud/edge services."""

__version__ = "0.1.0"
