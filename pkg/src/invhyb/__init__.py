"""Hybrid inclusions with inputs and disturbances: simulation, certificate checks and min-norm feedback synthesis."""

__version__ = "0.1.0"
