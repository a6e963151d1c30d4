"""Monte Carlo checks of fluctuation and response identities for stochastic differential equations."""

__version__ = "0.1.0"
