"""Delay-aware spatio-temporal graph forecasting.

Forecasts multi-node time series by estimating per-node propagation delays via
FFT cross-correlation, aligning series before graph aggregation, learning
multi-scale adjacencies (two Gumbel-regularized global graphs plus a
distance-modulated local graph), and stacking residual graph/fully-connected
forecast blocks. Runs on a small numpy-backed reverse-mode tape engine.
"""

from .errors import (
    CompatibilityError,
    ConfigurationError,
    DataError,
    DelaycastError,
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
    UsageError,
)

__all__ = [
    "CompatibilityError",
    "ConfigurationError",
    "DataError",
    "DelaycastError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "NumericError",
    "UsageError",
    "GraphForecaster",
]

__version__ = "0.1.0"


def __getattr__(name):
    # estimator pulls in the full model stack; import it on first use
    if name == "GraphForecaster":
        from .estimator import GraphForecaster

        return GraphForecaster
    raise AttributeError(name)
