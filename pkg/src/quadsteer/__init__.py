"""Covariance-steering trajectory synthesis and stochastic quadrotor simulation."""

__version__ = "0.1.0"
