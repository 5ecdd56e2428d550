"""Simulation and statistical checks for the long-jump exclusion process with a tagged particle."""

__version__ = "0.1.0"
