"""Incremental Gaussian-mixture clustering with outlier detection."""

from .core_math import GaussianComponent, MixtureModel
from .errors import IncGmmError
from .offline_gmm import OfflineFit, OutlierStore, fit_offline
from .online_update import BatchResult, OnlineConfig, online_step

__all__ = [
    "BatchResult",
    "GaussianComponent",
    "IncGmmError",
    "MixtureModel",
    "OfflineFit",
    "OnlineConfig",
    "OutlierStore",
    "fit_offline",
    "online_step",
]
