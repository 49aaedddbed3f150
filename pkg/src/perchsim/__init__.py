"""Vortex-wake glider simulation and perching control."""

__version__ = "0.1.0"
