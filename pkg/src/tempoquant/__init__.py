"""Tempo and rhythm estimation from onset times with a switching state-space model."""

__version__ = "0.1.0"
