"""Layerwise readout diagnostics, probing, sparse fusion, and retrieval evaluation."""

__version__ = "0.1.0"
