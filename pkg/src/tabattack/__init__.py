"""Validity-preserving l0 adversarial examples for heterogeneous tabular data."""

__version__ = "0.1.0"
