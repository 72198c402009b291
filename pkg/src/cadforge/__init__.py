"""Closed-loop synthesis, validation, and curation of parametric CAD programs."""

__version__ = "0.1.0"
