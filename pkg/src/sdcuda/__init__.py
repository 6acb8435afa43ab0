"""Slice-direction continuous volumetric domain adaptation on numpy."""

__version__ = "0.1.0"
