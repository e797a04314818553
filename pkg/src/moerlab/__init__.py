"""Mixture-of-Experts routing lab: KERN and baseline routers, NW oracles, toy training."""

__version__ = "0.1.0"
