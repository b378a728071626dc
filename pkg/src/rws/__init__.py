"""Renewable weighted-sum estimators for streaming nonparametric estimation."""

__version__ = "0.1.0"
