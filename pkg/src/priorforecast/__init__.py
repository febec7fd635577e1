"""Trajectory forecasting with traffic-rule priors on synthetic scenes."""

__version__ = "0.1.0"
