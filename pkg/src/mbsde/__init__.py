"""Monte Carlo solvers for multidimensional BSDEs with bounded terminal conditions."""

__version__ = "0.1.0"
