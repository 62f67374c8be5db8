"""Desk-scale partial domain adaptation benchmark: methods, scorers and protocol."""

__version__ = "0.1.0"
