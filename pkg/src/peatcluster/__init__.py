"""Condition clustering of surface-motion time series.

Pipeline: smoothing-spline decomposition, elastic registration of square-root
velocity functions, warp/amplitude distance features and a spatially smoothed
Gaussian mixture sampled by Gibbs.
"""

from .errors import DegenerateSRVFError, NumericalError, PeatClusterError, ValidationError

__version__ = "0.1.0"

__all__ = ["DegenerateSRVFError", "NumericalError", "PeatClusterError", "ValidationError", "__version__"]
