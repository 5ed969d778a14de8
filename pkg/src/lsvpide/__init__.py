"""Finite-difference pricing of a three-factor local-stochastic-volatility model with Meixner jumps."""

__version__ = "0.1.0"
