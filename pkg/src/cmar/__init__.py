"""Causal mediation analysis for rumour veracity classifiers."""

__version__ = "0.1.0"
