"""Executable system architectural models: loading, linting, runtime monitoring,
diagnosis and trace generation."""

__version__ = "0.1.0"
