"""Piecewise affine regression via majorization-minimization with a
semismooth Newton dual subproblem solver."""

from . import funcs, mm, pwa, snewton, stationarity  # noqa: F401

__version__ = "0.1.0"
