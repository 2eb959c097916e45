"""Simulation and Monte Carlo verification of compound Poisson fields under orderings."""

__version__ = "0.1.0"
