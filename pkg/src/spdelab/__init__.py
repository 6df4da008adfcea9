"""Pathwise numerics for singular stochastic fast diffusion and p-Laplace equations."""

__version__ = "0.1.0"
