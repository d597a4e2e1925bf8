"""Numerical verification of second-order necessary conditions for
stochastic optimal control problems with convex control sets."""

__version__ = "0.1.0"
