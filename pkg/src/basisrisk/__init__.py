"""Indifference prices, derivative hedges and marginal utility prices for
claims on non-tradable indices, via quadratic forward-backward SDEs."""

__version__ = "0.1.0"
