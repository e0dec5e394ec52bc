"""Continuous-time distributional policy evaluation with statistical HJB losses."""

__version__ = "0.1.0"
