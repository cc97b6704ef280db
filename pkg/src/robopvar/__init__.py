"""Robust GPD severity estimation and operational-risk capital quantiles."""

__version__ = "0.1.0"
