"""Gravity-predicted trade shocks, shift-share exposure and county IV regressions."""

__version__ = "0.1.0"
