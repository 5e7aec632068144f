"""Nonlinear spectra of finite metric measure spaces."""

__version__ = "0.1.0"
