"""Closed-loop synthetic 6G slice data with audit, calibration and governance."""

__version__ = "0.1.0"
