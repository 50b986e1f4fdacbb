"""Instrumented training of small dense networks with a telescoping first-order model."""

__version__ = "0.1.0"
