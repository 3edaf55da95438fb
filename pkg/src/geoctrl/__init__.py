"""Ray dynamics, geometric control and damped-wave tools on stationary
asymptotically flat spacetimes."""

__version__ = "0.1.0"
