"""Multivariate spatial disaggregation with coregionalized SPDE fields."""

__version__ = "0.1.0"
