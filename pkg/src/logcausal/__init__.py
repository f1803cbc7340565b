"""Causal analysis of implementation log data from randomized trials."""

__version__ = "0.1.0"
