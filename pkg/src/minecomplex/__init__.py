"""Simultaneous stochastic optimization of a mining complex at desk scale."""

__version__ = "0.1.0"
