"""Decoupled differentiable architecture search for spatio-temporal forecasting."""

__version__ = "0.1.0"
