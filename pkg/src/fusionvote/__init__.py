"""Dual-stream CNN + vision-transformer fusion classifiers and soft-voting ensembles."""

__version__ = "0.1.0"
