"""Executor worker: isolated execution and geometric validation of CAD programs."""

__version__ = "0.1.0"
