"""Tabular average-reward-adjusted discounted learning with exact MDP oracles."""

__version__ = "0.1.0"
