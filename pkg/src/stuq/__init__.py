"""Spatio-temporal traffic forecasting with aleatoric and epistemic uncertainty."""

from ._kernels import BACKEND
from .stgraph import Forecaster, ModelParams, ModelSpec

__version__ = "0.1.0"

__all__ = ["BACKEND", "Forecaster", "ModelParams", "ModelSpec", "__version__"]
