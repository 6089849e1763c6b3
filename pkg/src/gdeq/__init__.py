"""Equilibrium graph networks with quantum signal injection pathways."""

__version__ = "0.1.0"
