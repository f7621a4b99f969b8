"""Monte Carlo simulation of cold atoms guided by a current-carrying wire."""

__version__ = "0.1.0"
